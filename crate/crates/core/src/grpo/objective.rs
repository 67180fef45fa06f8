use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    Outcome,
    Process,
}

/// Per-token KL penalty against the reference policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlEstimator {
    /// `π_ref/π_θ − log(π_ref/π_θ) − 1` on the sampled token.
    Sampled,
    /// `Σ_v π_θ(v) (log π_θ(v) − log π_ref(v))` over the vocabulary.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    /// Clip range `ε`.
    pub epsilon: f64,
    /// KL weight `β`.
    pub beta: f64,
    /// Outputs sampled per prompt, `G`.
    pub group_size: usize,
    pub supervision: Supervision,
    pub std_floor: f64,
    pub kl_estimator: KlEstimator,
    /// Optimizer passes over each sampled batch; `π_old` is refreshed once
    /// per step.
    pub inner_epochs: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            beta: 0.04,
            group_size: 8,
            supervision: Supervision::Outcome,
            std_floor: 1e-8,
            kl_estimator: KlEstimator::Sampled,
            inner_epochs: 1,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return config_err(format!("epsilon = {} must be positive", self.epsilon));
        }
        if !(self.beta >= 0.0) {
            return config_err(format!("beta = {} must be nonnegative", self.beta));
        }
        if self.group_size < 2 {
            return config_err(format!("group_size = {} must be at least 2", self.group_size));
        }
        if !(self.std_floor > 0.0) {
            return config_err("std_floor must be positive");
        }
        if self.inner_epochs == 0 {
            return config_err("inner_epochs must be positive");
        }
        Ok(())
    }
}

/// Token-level inputs of the surrogate, flattened over all outputs.
///
/// Output `i` owns a contiguous run of `lens[i]` tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlatRollouts {
    pub lens: Vec<usize>,
    /// `log π_old` per token.
    pub logp_old: Vec<f64>,
    /// `log π_ref` per token.
    pub logp_ref: Vec<f64>,
    /// `Â_{i,t}` per token.
    pub advantages: Vec<f64>,
}

impl FlatRollouts {
    pub fn tokens(&self) -> usize {
        self.lens.iter().sum()
    }

    /// `1 / (G · |o_i|)` for every token of output `i`.
    fn weights(&self) -> Vec<f64> {
        let g = self.lens.len() as f64;
        self.lens
            .iter()
            .flat_map(|&l| std::iter::repeat_n(1.0 / (g * l as f64), l))
            .collect()
    }

    fn check(&self, n: usize) -> Result<()> {
        let total = self.tokens();
        if [n, self.logp_old.len(), self.logp_ref.len(), self.advantages.len()].iter().any(|&x| x != total) {
            return dim_err(format!("per-token arrays do not match {total} output tokens"));
        }
        if self.lens.contains(&0) {
            return dim_err("empty output in rollout group");
        }
        let finite = |xs: &[f64]| xs.iter().all(|x| !x.is_nan());
        if !finite(&self.logp_old) || !finite(&self.logp_ref) || !finite(&self.advantages) {
            return Err(Error::Numeric("NaN in rollout log-probabilities or advantages".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SurrogateStats {
    pub objective: f64,
    /// Mean per-token `KL̂(π_θ ‖ π_ref)`.
    pub kl: f64,
    /// Share of tokens with `|ρ − 1| > ε`.
    pub clip_fraction: f64,
}

/// `(1/G) Σ_i (1/|o_i|) Σ_t [min(ρ Â, clip(ρ, 1−ε, 1+ε) Â) − β KL̂]` with
/// `ρ = exp(log π_θ − log π_old)` and
/// `KL̂ = π_ref/π_θ − log(π_ref/π_θ) − 1`.
///
/// `logp_theta` is a flat vector of `log π_θ` per token.
pub fn grpo_objective(logp_theta: &Var, roll: &FlatRollouts, epsilon: f64, beta: f64) -> Result<(Var, SurrogateStats)> {
    let n = logp_theta.value().numel();
    let lp = logp_theta.reshape(&[n])?;
    let log_r = lp.tape().constant(Tensor::vector(roll.logp_ref.clone())).sub(&lp)?;
    let kl = log_r.exp().sub(&log_r)?.add_scalar(-1.0);
    surrogate(&lp, &kl, roll, epsilon, beta)
}

/// [`grpo_objective`] with the exact per-position KL. `rows_theta` holds
/// `log π_θ` over the vocabulary at every output position, `rows_ref` the
/// same under the reference policy, `targets` the sampled tokens.
pub fn grpo_objective_exact_kl(
    rows_theta: &Var,
    rows_ref: &Tensor,
    targets: &[usize],
    roll: &FlatRollouts,
    epsilon: f64,
    beta: f64,
) -> Result<(Var, SurrogateStats)> {
    if rows_theta.shape() != rows_ref.shape() {
        return dim_err(format!("policy rows {:?} vs reference rows {:?}", rows_theta.shape(), rows_ref.shape()));
    }
    let lp = rows_theta.pick_per_row(targets)?;
    let diff = rows_theta.sub(&rows_theta.tape().constant(rows_ref.clone()))?;
    let kl = rows_theta.exp().mul(&diff)?;
    let ones = rows_theta.tape().constant(Tensor::full(&[rows_ref.cols(), 1], 1.0));
    let kl = kl.matmul(&ones)?.reshape(&[targets.len()])?;
    surrogate(&lp, &kl, roll, epsilon, beta)
}

fn surrogate(lp: &Var, kl: &Var, roll: &FlatRollouts, epsilon: f64, beta: f64) -> Result<(Var, SurrogateStats)> {
    let n = lp.value().numel();
    roll.check(n)?;
    if lp.value().data().iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN in policy log-probabilities".into()));
    }
    let tape = lp.tape();
    let vecc = |v: &[f64]| tape.constant(Tensor::vector(v.to_vec()));
    let ratio = lp.sub(&vecc(&roll.logp_old))?.exp();
    let adv = vecc(&roll.advantages);
    let s1 = ratio.mul(&adv)?;
    let s2 = ratio.clamp(1.0 - epsilon, 1.0 + epsilon).mul(&adv)?;
    let mut per_tok = s1.minimum(&s2)?;
    if beta != 0.0 {
        per_tok = per_tok.sub(&kl.scale(beta))?;
    }
    let obj = per_tok.dot(&vecc(&roll.weights()))?;
    let rv = ratio.value();
    let clipped = rv.data().iter().filter(|r| (*r - 1.0).abs() > epsilon).count();
    let stats = SurrogateStats {
        objective: obj.item(),
        kl: kl.value().data().iter().sum::<f64>() / n.max(1) as f64,
        clip_fraction: clipped as f64 / n.max(1) as f64,
    };
    Ok((obj, stats))
}

/// Plain evaluation of [`grpo_objective`].
pub fn grpo_objective_value(logp_theta: &[f64], roll: &FlatRollouts, epsilon: f64, beta: f64) -> Result<SurrogateStats> {
    let tape = crate::tensor::Tape::new();
    let v = tape.constant(Tensor::vector(logp_theta.to_vec()));
    Ok(grpo_objective(&v, roll, epsilon, beta)?.1)
}

/// Clipped surrogate with externally supplied per-token advantages `A_t`,
/// averaged over each sequence's tokens and then over sequences. There is
/// no KL term and no value model.
pub fn ppo_objective(
    logp_theta: &[Vec<f64>],
    logp_old: &[Vec<f64>],
    advantages: &[Vec<f64>],
    epsilon: f64,
) -> Result<f64> {
    if logp_theta.len() != logp_old.len() || logp_theta.len() != advantages.len() || logp_theta.is_empty() {
        return dim_err("ppo objective needs aligned, nonempty sequence lists");
    }
    let mut total = 0.0;
    for ((th, old), adv) in logp_theta.iter().zip(logp_old).zip(advantages) {
        if th.len() != old.len() || th.len() != adv.len() || th.is_empty() {
            return dim_err("ppo objective needs aligned, nonempty token arrays");
        }
        let mut s = 0.0;
        for ((a, b), v) in th.iter().zip(old).zip(adv) {
            if a.is_nan() || b.is_nan() || v.is_nan() {
                return Err(Error::Numeric("NaN in ppo inputs".into()));
            }
            let r = (a - b).exp();
            s += (r * v).min(r.clamp(1.0 - epsilon, 1.0 + epsilon) * v);
        }
        total += s / th.len() as f64;
    }
    Ok(total / logp_theta.len() as f64)
}
