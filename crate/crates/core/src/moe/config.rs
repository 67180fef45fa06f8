use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// How routed experts are selected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Top-K by affinity, balanced by the expert-level auxiliary loss.
    AuxLoss,
    /// Top-K by affinity plus a per-expert bias that is nudged by `γ`.
    LossFree,
}

/// Elementwise nonlinearity between the two expert projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
}

/// Expert counts of one fine-grained mixture-of-experts layer.
///
/// `n` and `k` describe the conventional layer before segmentation; each
/// conventional expert is split into `m` experts whose inner width is
/// `ffn_inner / m`. Of the `m·n` resulting experts, `k_s` are shared and
/// always active; the rest are routed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeLayerConfig {
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub k_s: usize,
    /// Inner width of a conventional (unsegmented) expert.
    pub ffn_inner: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub routing_mode: RoutingMode,
    pub activation: Activation,
}

impl Default for MoeLayerConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n: 4,
            m: 2,
            k: 1,
            k_s: 1,
            ffn_inner: 128,
            alpha: 0.01,
            gamma: 0.001,
            routing_mode: RoutingMode::LossFree,
            activation: Activation::Silu,
        }
    }
}

impl MoeLayerConfig {
    /// Total expert count `m·N`.
    pub fn total_experts(&self) -> usize {
        self.m * self.n
    }

    /// `N_r = m·N − K_s`.
    pub fn n_routed(&self) -> usize {
        self.total_experts().saturating_sub(self.k_s)
    }

    /// `K_r = m·K − K_s`.
    pub fn k_routed(&self) -> usize {
        (self.m * self.k).saturating_sub(self.k_s)
    }

    /// Inner width of each segmented expert.
    pub fn expert_inner(&self) -> usize {
        self.ffn_inner / self.m.max(1)
    }

    /// Parameters of one segmented expert.
    pub fn params_per_expert(&self) -> usize {
        2 * self.d * self.expert_inner()
    }

    /// Parameters summed over shared and routed experts.
    pub fn total_expert_params(&self) -> usize {
        self.total_experts() * self.params_per_expert()
    }

    /// Expert parameters touched by one token: shared plus `K_r` routed.
    pub fn activated_expert_params(&self) -> usize {
        (self.k_s + self.k_routed()) * self.params_per_expert()
    }

    /// Router centroid parameters (`N_r·d`).
    pub fn router_params(&self) -> usize {
        self.n_routed() * self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.m == 0 || self.k == 0 || self.ffn_inner == 0 {
            return config_err("moe dims d, n, m, k, ffn_inner must be positive");
        }
        if !self.ffn_inner.is_multiple_of(self.m) {
            return config_err(format!(
                "segmentation factor m = {} does not divide ffn_inner = {}",
                self.m, self.ffn_inner
            ));
        }
        if self.k_s >= self.m * self.k {
            return config_err(format!(
                "K_r = m*K - K_s = {}*{} - {} must be at least 1",
                self.m, self.k, self.k_s
            ));
        }
        if self.k_routed() > self.n_routed() {
            return config_err(format!(
                "K_r = {} exceeds N_r = {}",
                self.k_routed(),
                self.n_routed()
            ));
        }
        if !(self.alpha >= 0.0) {
            return config_err(format!("alpha = {} must be nonnegative", self.alpha));
        }
        if !(self.gamma >= 0.0) {
            return config_err(format!("gamma = {} must be nonnegative", self.gamma));
        }
        Ok(())
    }
}
