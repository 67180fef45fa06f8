use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Dimensions of one attention sublayer and of the layer stack it lives in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Embedding width.
    pub d: usize,
    /// Head count.
    pub n_h: usize,
    /// Per-head width of the compressed query/key/value path.
    pub d_h: usize,
    /// Width of the joint key/value latent.
    pub d_c: usize,
    /// Width of the query latent.
    pub d_c_q: usize,
    /// Per-head width of the decoupled rotary query/key path (0 disables it).
    pub d_h_r: usize,
    /// Number of stacked layers; used for cache accounting.
    pub layers: usize,
    pub rope_base: f64,
    /// Standard rotary embedding on full q,k of the MHA baseline.
    pub mha_rope: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_h: 4,
            d_h: 16,
            d_c: 64,
            d_c_q: 32,
            d_h_r: 8,
            layers: 2,
            rope_base: 10_000.0,
            mha_rope: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    Mha,
    Mla,
}

impl AttentionConfig {
    /// `d_h · n_h`, the width of the concatenated heads.
    pub fn inner(&self) -> usize {
        self.d_h * self.n_h
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_h == 0 || self.d_h == 0 || self.d_c == 0 || self.d_c_q == 0 {
            return config_err("attention dims d, n_h, d_h, d_c, d_c_q must be positive");
        }
        if self.d_c > self.inner() {
            return config_err(format!(
                "d_c = {} exceeds d_h*n_h = {}",
                self.d_c,
                self.inner()
            ));
        }
        if self.d_c_q > self.inner() {
            return config_err(format!(
                "d_c_q = {} exceeds d_h*n_h = {}",
                self.d_c_q,
                self.inner()
            ));
        }
        if !self.d_h_r.is_multiple_of(2) {
            return config_err(format!("d_h_r = {} must be even for rotary pairs", self.d_h_r));
        }
        if self.mha_rope && !self.d_h.is_multiple_of(2) {
            return config_err(format!("d_h = {} must be even for rotary pairs", self.d_h));
        }
        if !(self.rope_base > 1.0) {
            return config_err("rope_base must exceed 1");
        }
        Ok(())
    }
}

/// Scalars cached per token across all layers.
///
/// MHA stores full keys and values, `2·n_h·d_h·l`. MLA stores the joint
/// latent and the shared rotary key, `(d_c + d_h_r)·l`.
pub fn kv_cache_size(cfg: &AttentionConfig, variant: AttentionVariant) -> usize {
    match variant {
        AttentionVariant::Mha => 2 * cfg.n_h * cfg.d_h * cfg.layers,
        AttentionVariant::Mla => (cfg.d_c + cfg.d_h_r) * cfg.layers,
    }
}
