//! Desk-scale implementations of latent-compressed attention, fine-grained
//! mixture-of-experts routing, multi-token prediction and group-relative
//! policy optimization, wired into a character-level toy language model.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod attention;
pub mod grpo;
pub mod lm;
pub mod model;
pub mod moe;
pub mod mtp;
pub mod optim;
pub mod tensor;

pub use attention::{AttentionConfig, AttentionVariant, LatentKVCache, MhaWeights, MlaWeights};
pub use error::{Error, Result};
pub use tensor::{Bound, Checkpoint, ParamId, ParamStore, Precision, Tape, Tensor, Var};
