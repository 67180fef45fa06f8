//! Multi-head attention, multi-head latent attention with decoupled rotary
//! keys, the absorbed single-token inference path and cache accounting.

mod cache;
mod config;
mod mha;
mod mla;
mod rope;

pub use cache::{KvLayerCache, LatentKVCache, LatentLayerCache, LayerCache};
pub use config::{kv_cache_size, AttentionConfig, AttentionVariant};
pub use mha::{mha_forward, mha_forward_infer, mha_forward_seqs, MhaWeights};
pub use mla::{mla_forward_infer, mla_forward_seqs, mla_forward_train, MlaWeights};
pub use rope::rope_apply;

use crate::error::Result;
use crate::tensor::Var;

/// Normal initialization for projection matrices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Init {
    pub std: f64,
    /// Zero the output projection so the residual branch starts as identity.
    pub zero_out: bool,
}

impl Init {
    pub fn normal(std: f64) -> Self {
        Self { std, zero_out: false }
    }

    pub fn out_std(&self) -> f64 {
        if self.zero_out {
            0.0
        } else {
            self.std
        }
    }
}

impl Default for Init {
    fn default() -> Self {
        Self { std: 0.02, zero_out: true }
    }
}

/// One causal head: `softmax(q kᵀ · scale) v`.
pub(crate) fn attend(q: &Var, k: &Var, v: &Var, scale: f64) -> Result<Var> {
    q.matmul_t(k)?.causal_softmax_rows(scale)?.matmul(v)
}
