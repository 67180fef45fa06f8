//! Tabular softmax policy over a fixed set of single-token answers.

use super::objective::GrpoConfig;
use super::step::{grpo_step, GrpoMetrics, Policy, Score};
use crate::error::{dim_err, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::rng::{categorical, stream, Rng};
use crate::tensor::{softmax_in_place, Bound, ParamId, ParamStore, Precision, Tensor, Var};

#[derive(Clone, Debug)]
pub struct BanditPolicy {
    pub store: ParamStore,
    /// `[1 × arms]`
    pub logits: ParamId,
}

impl BanditPolicy {
    /// Uniform policy over `arms` answers.
    pub fn new(arms: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let logits = store.add("logits", Tensor::zeros(&[1, arms]))?;
        Ok(Self { store, logits })
    }

    pub fn probs(&self) -> Vec<f64> {
        let mut p = self.store.get(self.logits).data().to_vec();
        softmax_in_place(&mut p);
        p
    }

    /// `KL(π ‖ π_ref)` summed over arms.
    pub fn kl_to(&self, reference: &ParamStore) -> f64 {
        let mut q = reference.get(self.logits).data().to_vec();
        softmax_in_place(&mut q);
        self.probs().iter().zip(&q).map(|(p, q)| if *p > 0.0 { p * (p / q).ln() } else { 0.0 }).sum()
    }
}

impl Policy for BanditPolicy {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn sample(&self, _prompt: &[usize], rng: &mut Rng) -> Result<Vec<usize>> {
        Ok(vec![categorical(&self.probs(), rng)])
    }

    fn output_log_probs(&self, p: &Bound, pairs: &[(&[usize], &[usize])]) -> Result<Var> {
        if pairs.iter().any(|(_, o)| o.len() != 1) {
            return dim_err("bandit outputs are single tokens");
        }
        p[self.logits].gather_rows(&vec![0; pairs.len()])?.log_softmax_rows()
    }
}

/// Settings of a single-prompt bandit run.
#[derive(Clone, Debug)]
pub struct BanditTask {
    pub arms: usize,
    pub best: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for BanditTask {
    fn default() -> Self {
        Self { arms: 10, best: 3, steps: 500, lr: 0.05 }
    }
}

#[derive(Clone, Debug)]
pub struct BanditRun {
    /// Best-arm probability after each step.
    pub best_prob: Vec<f64>,
    pub metrics: Vec<GrpoMetrics>,
    pub policy: BanditPolicy,
}

impl BanditRun {
    /// First step (1-based) after which the best arm holds `threshold`.
    pub fn steps_to(&self, threshold: f64) -> Option<usize> {
        self.best_prob.iter().position(|p| *p >= threshold).map(|i| i + 1)
    }
}

/// GRPO on a fixed prompt whose only rewarded answer is arm `task.best`,
/// starting from the uniform policy, which also serves as the reference.
pub fn run_bandit(seed: u64, task: &BanditTask, cfg: &GrpoConfig) -> Result<BanditRun> {
    let mut policy = BanditPolicy::new(task.arms)?;
    let reference = policy.store.clone();
    let opt_cfg = AdamConfig { lr: task.lr, warmup_steps: 0, clip_norm: 0.0, ..Default::default() };
    let mut opt = Adam::new(opt_cfg, &policy.store);
    let mut rng = stream(seed, "grpo.bandit");
    let prompts = vec![vec![0]];
    let best = task.best;
    let mut reward = |_: usize, o: &[usize]| Ok(Score::Outcome(if o[0] == best { 1.0 } else { 0.0 }));
    let mut run = BanditRun { best_prob: Vec::new(), metrics: Vec::new(), policy: policy.clone() };
    for _ in 0..task.steps {
        let m = grpo_step(&mut policy, &reference, &prompts, &mut reward, cfg, &mut opt, &mut rng, Precision::F64)?;
        run.metrics.push(m);
        run.best_prob.push(policy.probs()[best]);
    }
    run.policy = policy;
    Ok(run)
}
