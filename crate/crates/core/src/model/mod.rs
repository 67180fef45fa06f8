//! The toy language model: embedding, stacked attention/feed-forward
//! blocks, shared output head and optional multi-token prediction depths.

mod block;
mod config;
mod toy;

pub use block::{rms_norm_plain, AttnWeights, Block, BlockOut, FfnWeights};
pub use config::{FfnKind, ModelConfig};
pub use toy::{LossParts, ToyModel, Trunk};
