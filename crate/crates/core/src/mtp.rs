//! Multi-token prediction: `D` sequential depth modules that each predict
//! one more future token, sharing the trunk's embedding and output head.
//!
//! Index convention for a sequence of `T + 1` tokens `t_0..t_T` whose trunk
//! hidden states are `h⁰_0..h⁰_{T−1}`: depth `k` has `T − k` positions
//! `j = 0..T−k−1`, input
//!
//! ```text
//! h'ᵏ_j = M_k [RMSNorm(Emb(t_{j+k})) ; RMSNorm(hᵏ⁻¹_j)]
//! hᵏ    = Block_k(h'ᵏ)          (causal over j)
//! Pᵏ_j  = Head(hᵏ_j)            predicts t_{j+k+1}
//! ```
//!
//! and loss `Lᵏ = −(1/T) Σ_j log Pᵏ_j[t_{j+k+1}]`, `L = (λ/D) Σ_k Lᵏ`.
//! The `1/T` normalizer is kept although only `T − k` terms exist.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, dim_err, Result};
use crate::model::{Block, ModelConfig, ToyModel};
use crate::moe::LoadStats;
use crate::tensor::{log_sum_exp, Bound, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtpConfig {
    /// Extra prediction depths `D`; 0 disables the modules.
    pub depth: usize,
    /// Loss weight `λ`.
    pub lambda: f64,
}

impl Default for MtpConfig {
    fn default() -> Self {
        Self { depth: 1, lambda: 0.3 }
    }
}

impl MtpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return config_err(format!("mtp lambda = {} must be finite and nonnegative", self.lambda));
        }
        Ok(())
    }
}

/// Depth-`k` module: two norm gains, the projection `M_k: [d × 2d]` and an
/// independent transformer block.
#[derive(Clone, Debug)]
pub struct MtpModule {
    pub norm_emb: ParamId,
    pub norm_prev: ParamId,
    pub proj: ParamId,
    pub block: Block,
}

impl MtpModule {
    pub fn init(store: &mut ParamStore, k: usize, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let d = cfg.d();
        let prefix = format!("mtp{k}");
        Ok(Self {
            norm_emb: store.add(format!("{prefix}.norm_emb"), Tensor::full(&[d], 1.0))?,
            norm_prev: store.add(format!("{prefix}.norm_prev"), Tensor::full(&[d], 1.0))?,
            proj: store.add_normal(seed, &format!("{prefix}.proj"), &[d, 2 * d], cfg.init_std)?,
            block: Block::init(store, &format!("{prefix}.block"), cfg, seed)?,
        })
    }
}

/// Per-depth logits and targets of a batch.
pub struct MtpOutput {
    /// Depth `k` (index `k − 1`): `[B·(T−k) × V]`.
    pub logits: Vec<Var>,
    pub targets: Vec<Vec<usize>>,
    /// Balance losses of MoE sublayers inside the depth blocks.
    pub aux: Vec<Var>,
    pub stats: Vec<LoadStats>,
}

/// Runs the depth chain on trunk states `main_hidden: [B·T × d]` of `B`
/// sequences of `T + 1` tokens.
pub fn mtp_forward(main_hidden: &Var, tokens: &[Vec<usize>], model: &ToyModel, p: &Bound) -> Result<MtpOutput> {
    let cfg = &model.cfg;
    let b = tokens.len();
    let rows = main_hidden.value().rows();
    if b == 0 || !rows.is_multiple_of(b) {
        return dim_err(format!("{rows} hidden rows for {b} sequences"));
    }
    let t = rows / b;
    if tokens.iter().any(|s| s.len() < t + 1) {
        return contract(format!("every sequence needs T + 1 = {} tokens", t + 1));
    }
    let depth = model.mtp.len();
    if depth > 0 && t <= depth {
        return contract(format!("T = {t} is too short for {depth} prediction depths"));
    }
    let mut out = MtpOutput { logits: Vec::new(), targets: Vec::new(), aux: Vec::new(), stats: Vec::new() };
    let mut prev = main_hidden.clone();
    for (i, m) in model.mtp.iter().enumerate() {
        let k = i + 1;
        let n = t - k;
        // Keep the first T−k rows of each sequence of the previous depth.
        let keep: Vec<usize> = (0..b).flat_map(|s| (0..n).map(move |j| s * (n + 1) + j)).collect();
        let prev_rows = prev.gather_rows(&keep)?;
        let emb_tok: Vec<usize> = tokens.iter().flat_map(|s| (0..n).map(move |j| s[j + k])).collect();
        let emb = p[model.embed].gather_rows(&emb_tok)?;
        let x = main_hidden.tape().concat(
            &[&emb.rms_norm(&p[m.norm_emb], cfg.norm_eps)?, &prev_rows.rms_norm(&p[m.norm_prev], cfg.norm_eps)?],
            1,
        )?;
        let x = x.matmul_t(&p[m.proj])?;
        let bo = m.block.forward(&x, p, cfg, n)?;
        out.logits.push(model.logits(&bo.h, p)?);
        out.targets.push(tokens.iter().flat_map(|s| (0..n).map(move |j| s[j + k + 1])).collect());
        out.aux.extend(bo.aux);
        out.stats.extend(bo.stats);
        prev = bo.h;
    }
    Ok(out)
}

/// Per-depth losses `Lᵏ` on the tape for a batch of `B` sequences with main
/// length `T`; each is averaged over `B·T`.
pub fn mtp_depth_losses_tape(out: &MtpOutput, b: usize, t: usize) -> Result<Vec<Var>> {
    out.logits
        .iter()
        .zip(&out.targets)
        .map(|(l, tg)| Ok(l.log_softmax_rows()?.pick_per_row(tg)?.sum().scale(-1.0 / (b * t) as f64)))
        .collect()
}

/// Per-depth losses for one sequence of `T + 1` tokens from plain logits;
/// `logits[k − 1]` has `T − k` rows.
pub fn mtp_depth_losses(logits: &[Tensor], tokens: &[usize]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return contract("empty token sequence");
    }
    let t = tokens.len() - 1;
    let mut out = Vec::with_capacity(logits.len());
    for (i, l) in logits.iter().enumerate() {
        let k = i + 1;
        if k >= t || l.rows() != t - k {
            return dim_err(format!("depth {k} logits have {} rows, expected T − k = {}", l.rows(), t.saturating_sub(k)));
        }
        if !l.is_finite() {
            return Err(crate::Error::Numeric(format!("depth {k} logits are not finite")));
        }
        let mut s = 0.0;
        for j in 0..t - k {
            let row = l.row(j);
            s += row[tokens[j + k + 1]] - log_sum_exp(row);
        }
        out.push(-s / t as f64);
    }
    Ok(out)
}

/// `L_MTP = (λ/D) Σ_k Lᵏ`; 0 when `D = 0`.
pub fn mtp_loss(logits: &[Tensor], tokens: &[usize], lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return config_err(format!("mtp lambda = {lambda} must be nonnegative"));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let per = mtp_depth_losses(logits, tokens)?;
    Ok(lambda / logits.len() as f64 * per.iter().sum::<f64>())
}
