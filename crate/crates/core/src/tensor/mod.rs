//! Dense tensors, the autodiff tape, parameter storage and checkpoints.

pub mod checkpoint;
mod dense;
mod gemm;
pub mod gradcheck;
mod params;
pub mod rng;
mod tape;

pub use checkpoint::Checkpoint;
pub use dense::{log_sum_exp, softmax_in_place, Precision, Tensor};
pub(crate) use dense::dot;
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub(crate) use tape::rotate_row;
