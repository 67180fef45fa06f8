use super::advantage::{outcome_advantages, process_advantages};
use super::objective::{grpo_objective, grpo_objective_exact_kl, FlatRollouts, GrpoConfig, KlEstimator, Supervision};
use crate::error::{contract, Error, Result};
use crate::optim::Adam;
use crate::tensor::rng::Rng;
use crate::tensor::{Bound, ParamStore, Precision, Tape, Var};

/// A sampling policy whose parameters live in a [`ParamStore`].
pub trait Policy {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Draws one output for `prompt`.
    fn sample(&self, prompt: &[usize], rng: &mut Rng) -> Result<Vec<usize>>;
    /// Log-softmax rows `[N × V]` at every output position of every
    /// `(prompt, output)` pair, in order, evaluated with parameters `p`
    /// (which may come from any store with this policy's layout).
    fn output_log_probs(&self, p: &Bound, pairs: &[(&[usize], &[usize])]) -> Result<Var>;
}

/// What a reward function returns for one output.
#[derive(Clone, Debug, PartialEq)]
pub enum Score {
    Outcome(f64),
    /// `(end_index, reward)` per reasoning step.
    Steps(Vec<(usize, f64)>),
}

impl Score {
    pub fn total(&self) -> f64 {
        match self {
            Score::Outcome(r) => *r,
            Score::Steps(s) => s.iter().map(|(_, r)| r).sum(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GrpoMetrics {
    pub mean_reward: f64,
    /// Mean per-token KL to the reference policy before the update.
    pub kl: f64,
    pub clip_fraction: f64,
    /// Objective before the update.
    pub objective: f64,
    pub grad_norm: f64,
    /// Mean output length in tokens.
    pub mean_len: f64,
}

/// Header of the per-step metrics CSV.
pub const METRICS_HEADER: &str = "step,mean_reward,kl,clip_fraction,objective,grad_norm,mean_len";

/// Per-step metrics as CSV with a leading format tag line.
pub fn metrics_csv(rows: &[GrpoMetrics]) -> String {
    let mut s = format!("# tinyseek-grpo-metrics v1\n{METRICS_HEADER}\n");
    for (i, m) in rows.iter().enumerate() {
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            i + 1,
            m.mean_reward,
            m.kl,
            m.clip_fraction,
            m.objective,
            m.grad_norm,
            m.mean_len
        ));
    }
    s
}

/// Sampled outputs and their scores for a batch of prompts.
#[derive(Clone, Debug, Default)]
pub struct Rollouts {
    pub prompt_index: Vec<usize>,
    pub outputs: Vec<Vec<usize>>,
    pub scores: Vec<Score>,
}

/// Samples `G` outputs per prompt from the current policy and scores them.
pub fn sample_groups<P: Policy>(
    policy: &P,
    prompts: &[Vec<usize>],
    reward_fn: &mut dyn FnMut(usize, &[usize]) -> Result<Score>,
    g: usize,
    rng: &mut Rng,
) -> Result<Rollouts> {
    let mut r = Rollouts::default();
    for (pi, prompt) in prompts.iter().enumerate() {
        for _ in 0..g {
            let out = policy.sample(prompt, rng)?;
            if out.is_empty() {
                return contract("policy produced an empty output");
            }
            let score = reward_fn(pi, &out)?;
            r.prompt_index.push(pi);
            r.outputs.push(out);
            r.scores.push(score);
        }
    }
    Ok(r)
}

fn advantages(roll: &Rollouts, g: usize, cfg: &GrpoConfig) -> Result<Vec<f64>> {
    let mut flat = Vec::new();
    for (outs, scores) in roll.outputs.chunks(g).zip(roll.scores.chunks(g)) {
        match cfg.supervision {
            Supervision::Outcome => {
                let rewards: Vec<f64> = scores.iter().map(Score::total).collect();
                let adv = outcome_advantages(&rewards, cfg.std_floor)?;
                for (o, a) in outs.iter().zip(adv) {
                    flat.extend(std::iter::repeat_n(a, o.len()));
                }
            }
            Supervision::Process => {
                let steps = scores
                    .iter()
                    .map(|s| match s {
                        Score::Steps(v) => Ok(v.clone()),
                        Score::Outcome(_) => contract("process supervision needs step rewards"),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let lens: Vec<usize> = outs.iter().map(Vec::len).collect();
                for adv in process_advantages(&steps, &lens, cfg.std_floor)? {
                    flat.extend(adv);
                }
            }
        }
    }
    Ok(flat)
}

/// One GRPO update: sample from the frozen current policy, score, form
/// group-relative advantages and ascend the clipped objective.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step<P: Policy>(
    policy: &mut P,
    reference: &ParamStore,
    prompts: &[Vec<usize>],
    reward_fn: &mut dyn FnMut(usize, &[usize]) -> Result<Score>,
    cfg: &GrpoConfig,
    opt: &mut Adam,
    rng: &mut Rng,
    precision: Precision,
) -> Result<GrpoMetrics> {
    cfg.validate()?;
    if !reference.same_layout(policy.params()) {
        return contract("reference policy layout differs from the trained policy");
    }
    let g = cfg.group_size;
    let roll = sample_groups(&*policy, prompts, reward_fn, g, rng)?;
    update_on_rollouts(policy, reference, prompts, &roll, cfg, opt, precision)
}

/// The optimization half of [`grpo_step`] on already scored rollouts.
pub fn update_on_rollouts<P: Policy>(
    policy: &mut P,
    reference: &ParamStore,
    prompts: &[Vec<usize>],
    roll: &Rollouts,
    cfg: &GrpoConfig,
    opt: &mut Adam,
    precision: Precision,
) -> Result<GrpoMetrics> {
    let g = cfg.group_size;
    if roll.outputs.len() != prompts.len() * g {
        return contract("rollouts do not hold G outputs per prompt");
    }
    let adv = advantages(roll, g, cfg)?;
    let pairs: Vec<(&[usize], &[usize])> = roll
        .prompt_index
        .iter()
        .zip(&roll.outputs)
        .map(|(&pi, o)| (prompts[pi].as_slice(), o.as_slice()))
        .collect();
    let targets: Vec<usize> = roll.outputs.iter().flatten().copied().collect();

    let ref_tape = Tape::new();
    let ref_rows = policy.output_log_probs(&reference.bind_frozen(&ref_tape), &pairs)?.value();
    let logp_ref: Vec<f64> = targets.iter().enumerate().map(|(i, &t)| ref_rows.at(i, t)).collect();

    let mut flat = FlatRollouts {
        lens: roll.outputs.iter().map(Vec::len).collect(),
        logp_old: Vec::new(),
        logp_ref,
        advantages: adv,
    };
    let mut metrics = GrpoMetrics {
        mean_reward: roll.scores.iter().map(Score::total).sum::<f64>() / roll.scores.len() as f64,
        mean_len: targets.len() as f64 / roll.outputs.len() as f64,
        ..Default::default()
    };
    for epoch in 0..cfg.inner_epochs {
        let tape = Tape::with_precision(precision);
        let p = policy.params().bind(&tape);
        let rows = policy.output_log_probs(&p, &pairs)?;
        if epoch == 0 {
            // π_old is the policy that sampled: the pre-update parameters.
            let rv = rows.value();
            flat.logp_old = targets.iter().enumerate().map(|(i, &t)| rv.at(i, t)).collect();
        }
        let (obj, stats) = match cfg.kl_estimator {
            KlEstimator::Sampled => grpo_objective(&rows.pick_per_row(&targets)?, &flat, cfg.epsilon, cfg.beta)?,
            KlEstimator::Exact => grpo_objective_exact_kl(&rows, &ref_rows, &targets, &flat, cfg.epsilon, cfg.beta)?,
        };
        if !stats.objective.is_finite() {
            return Err(Error::Numeric("non-finite GRPO objective".into()));
        }
        obj.neg().backward()?;
        let info = opt.step(policy.params_mut(), &p.grads(), precision)?;
        if epoch == 0 {
            metrics.kl = stats.kl;
            metrics.clip_fraction = stats.clip_fraction;
            metrics.objective = stats.objective;
            metrics.grad_norm = info.grad_norm;
        }
    }
    Ok(metrics)
}
