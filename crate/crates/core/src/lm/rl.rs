//! Reasoning RL on the arithmetic task, task evaluation and rejection
//! sampling.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::arith::{problems, ArithConfig, Problem};
use super::policy::LmPolicy;
use super::rewards::{reward_accuracy, reward_format, RewardRegistry};
use super::sft::SftRecord;
use super::tokenizer::CharTokenizer;
use crate::error::{config_err, Result};
use crate::grpo::{grpo_step, GrpoConfig, GrpoMetrics, Policy, Score};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::rng::{indexed_stream, stream};
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub steps: usize,
    pub prompts_per_step: usize,
    pub grpo: GrpoConfig,
    pub optimizer: AdamConfig,
    /// Reward name → weight.
    pub rewards: BTreeMap<String, f64>,
    /// Completion length cap in tokens.
    pub max_new: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            prompts_per_step: 8,
            grpo: GrpoConfig::default(),
            optimizer: AdamConfig { lr: 3e-4, warmup_steps: 0, ..Default::default() },
            rewards: BTreeMap::from([("accuracy".into(), 1.0), ("format".into(), 1.0)]),
            max_new: 32,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompts_per_step == 0 || self.max_new == 0 {
            return config_err("prompts_per_step and max_new must be positive");
        }
        self.grpo.validate()?;
        self.optimizer.validate()?;
        RewardRegistry::new(&self.rewards).map(|_| ())
    }
}

/// One RL step: the update metrics plus task rates over its rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct RlStepMetrics {
    pub grpo: GrpoMetrics,
    pub format_rate: f64,
    pub accuracy: f64,
}

pub const RL_METRICS_TAG: &str = "# tinyseek-rl-metrics v1";
pub const RL_METRICS_HEADER: &str = "step,mean_reward,kl,clip_fraction,objective,grad_norm,mean_len,format_rate,accuracy";

pub fn rl_metrics_csv(rows: &[RlStepMetrics]) -> String {
    let mut s = format!("{RL_METRICS_TAG}\n{RL_METRICS_HEADER}\n");
    for (i, r) in rows.iter().enumerate() {
        let g = &r.grpo;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            i + 1,
            g.mean_reward,
            g.kl,
            g.clip_fraction,
            g.objective,
            g.grad_norm,
            g.mean_len,
            r.format_rate,
            r.accuracy
        ));
    }
    s
}

impl RlStepMetrics {
    /// First step (1-based) whose rollout format rate reaches `threshold`.
    pub fn steps_to_format(rows: &[RlStepMetrics], threshold: f64) -> Option<usize> {
        rows.iter().position(|r| r.format_rate >= threshold).map(|i| i + 1)
    }
}

/// GRPO against the frozen starting policy on freshly drawn problems.
pub fn reasoning_rl(
    policy: &mut LmPolicy,
    tok: &CharTokenizer,
    task: &ArithConfig,
    cfg: &RlConfig,
    seed: u64,
    precision: Precision,
) -> Result<Vec<RlStepMetrics>> {
    cfg.validate()?;
    let registry = RewardRegistry::new(&cfg.rewards)?;
    let reference = policy.params().clone();
    let mut opt = Adam::new(cfg.optimizer.clone(), policy.params());
    policy.max_new = cfg.max_new;
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let probs = problems(seed, &format!("rl.prompts.{step}"), cfg.prompts_per_step, task);
        let texts: Vec<String> = probs.iter().map(Problem::prompt).collect();
        let prompts = texts.iter().map(|t| tok.encode(t)).collect::<Result<Vec<_>>>()?;
        let (mut fmt, mut acc, mut n) = (0.0, 0.0, 0.0);
        let mut reward = |i: usize, out: &[usize]| {
            let c = tok.decode(out);
            fmt += reward_format(&c);
            acc += reward_accuracy(&texts[i], &c);
            n += 1.0;
            Ok(Score::Outcome(registry.score(&texts[i], &c)))
        };
        let mut rng = indexed_stream(seed, "rl.sample", step as u64);
        let g = grpo_step(policy, &reference, &prompts, &mut reward, &cfg.grpo, &mut opt, &mut rng, precision)?;
        rows.push(RlStepMetrics { grpo: g, format_rate: fmt / n, accuracy: acc / n });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEval {
    pub accuracy: f64,
    pub format_rate: f64,
    pub mean_len: f64,
}

/// Sampled completions for `n` held-out problems, `k` per problem.
pub fn evaluate_task(policy: &LmPolicy, tok: &CharTokenizer, task: &ArithConfig, n: usize, k: usize, seed: u64) -> Result<TaskEval> {
    let probs = problems(seed, "eval.prompts", n, task);
    let mut rng = stream(seed, "eval.sample");
    let (mut acc, mut fmt, mut len) = (0.0, 0.0, 0.0);
    for p in &probs {
        let prompt = p.prompt();
        let ids = tok.encode(&prompt)?;
        for _ in 0..k {
            let out = policy.sample(&ids, &mut rng)?;
            let c = tok.decode(&out);
            acc += reward_accuracy(&prompt, &c);
            fmt += reward_format(&c);
            len += out.len() as f64;
        }
    }
    let total = (n * k).max(1) as f64;
    Ok(TaskEval { accuracy: acc / total, format_rate: fmt / total, mean_len: len / total })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RejectionResult {
    pub records: Vec<SftRecord>,
    pub sampled: usize,
    /// Completions meeting the keep rule, before deduplication.
    pub survivors: usize,
}

impl RejectionResult {
    pub fn survivor_fraction(&self) -> f64 {
        self.survivors as f64 / self.sampled.max(1) as f64
    }
}

/// Samples `n_per_prompt` completions per prompt and keeps those scoring at
/// least `min_reward`, dropping exact duplicates.
pub fn rejection_sample(
    policy: &LmPolicy,
    tok: &CharTokenizer,
    prompts: &[String],
    reward_fn: &dyn Fn(&str, &str) -> f64,
    n_per_prompt: usize,
    min_reward: f64,
    seed: u64,
) -> Result<RejectionResult> {
    let mut rng = stream(seed, "rejection.sample");
    let mut seen = HashSet::new();
    let mut res = RejectionResult::default();
    for prompt in prompts {
        let ids = tok.encode(prompt)?;
        for _ in 0..n_per_prompt {
            let completion = tok.decode(&policy.sample(&ids, &mut rng)?);
            res.sampled += 1;
            if reward_fn(prompt, &completion) >= min_reward {
                res.survivors += 1;
                let r = SftRecord { prompt: prompt.clone(), completion };
                if seen.insert(r.clone()) {
                    res.records.push(r);
                }
            }
        }
    }
    Ok(res)
}
