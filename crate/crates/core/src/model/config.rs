use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionVariant, MhaWeights, MlaWeights};
use crate::error::{config_err, Result};
use crate::moe::MoeLayerConfig;
use crate::mtp::MtpConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    Dense,
    Moe,
}

/// Architecture of the toy language model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Vocabulary size; 0 means "take it from the tokenizer".
    pub vocab_size: usize,
    pub attention: AttentionConfig,
    pub attention_variant: AttentionVariant,
    pub ffn: FfnKind,
    /// Inner width of the dense feed-forward sublayer.
    pub dense_inner: usize,
    pub moe: MoeLayerConfig,
    pub mtp: MtpConfig,
    /// Reuse the embedding matrix as the output head.
    pub tied_head: bool,
    pub norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            attention: AttentionConfig::default(),
            attention_variant: AttentionVariant::Mla,
            ffn: FfnKind::Dense,
            dense_inner: 128,
            moe: MoeLayerConfig::default(),
            mtp: MtpConfig::default(),
            tied_head: false,
            norm_eps: 1e-6,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn d(&self) -> usize {
        self.attention.d
    }

    pub fn layers(&self) -> usize {
        self.attention.layers
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.vocab_size == 0 {
            return config_err("vocab_size must be resolved before building a model");
        }
        if self.attention.layers == 0 {
            return config_err("the model needs at least one layer");
        }
        match self.ffn {
            FfnKind::Dense if self.dense_inner == 0 => return config_err("dense_inner must be positive"),
            FfnKind::Moe => {
                self.moe.validate()?;
                if self.moe.d != self.d() {
                    return config_err(format!("moe.d = {} differs from attention.d = {}", self.moe.d, self.d()));
                }
            }
            _ => {}
        }
        self.mtp.validate()?;
        if !(self.norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return config_err("norm_eps must be positive and init_std nonnegative");
        }
        Ok(())
    }

    fn attention_params(&self) -> usize {
        match self.attention_variant {
            AttentionVariant::Mha => MhaWeights::num_params(&self.attention),
            AttentionVariant::Mla => MlaWeights::num_params(&self.attention),
        }
    }

    fn ffn_params(&self) -> usize {
        match self.ffn {
            FfnKind::Dense => 2 * self.d() * self.dense_inner,
            FfnKind::Moe => self.moe.total_expert_params() + self.moe.router_params(),
        }
    }

    /// Trainable parameters of one transformer block.
    pub fn block_params(&self) -> usize {
        2 * self.d() + self.attention_params() + self.ffn_params()
    }

    /// Trainable parameters implied by the configuration.
    pub fn analytic_param_count(&self) -> usize {
        let (v, d) = (self.vocab_size, self.d());
        let head = if self.tied_head { 0 } else { v * d };
        let mtp = self.mtp.depth * (2 * d + 2 * d * d + self.block_params());
        v * d + self.layers() * self.block_params() + d + head + mtp
    }
}
