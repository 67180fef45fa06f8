//! Ordered post-training plan: pretraining, cold-start SFT, reasoning RL,
//! rejection-sampled SFT and a rule-based alignment proxy.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arith::{alphabet, problems, ArithConfig, Problem};
use super::corpus::Corpus;
use super::policy::LmPolicy;
use super::pretrain::{metrics_csv, smoothed_loss, PretrainConfig, Trainer};
use super::rewards::RewardRegistry;
use super::rl::{evaluate_task, reasoning_rl, rejection_sample, rl_metrics_csv, RlConfig, RlStepMetrics};
use super::sft::{sft_train, SftConfig, SftRecord};
use super::tokenizer::CharTokenizer;
use crate::error::{config_err, Result};
use crate::model::ToyModel;
use crate::optim::AdamConfig;
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColdStartConfig {
    /// Generated well-formatted reasoning examples.
    pub samples: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for ColdStartConfig {
    fn default() -> Self {
        let s = SftConfig::default();
        Self { samples: 2000, steps: s.steps, batch_size: s.batch_size, optimizer: s.optimizer }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RejectionConfig {
    pub prompts: usize,
    pub n_per_prompt: usize,
    /// Keep completions whose weighted reward reaches this value.
    pub min_reward: f64,
    pub rewards: BTreeMap<String, f64>,
    pub max_new: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        let s = SftConfig::default();
        Self {
            prompts: 200,
            n_per_prompt: 4,
            min_reward: 1.0,
            rewards: BTreeMap::from([("accuracy".into(), 0.5), ("format".into(), 0.5)]),
            max_new: 32,
            steps: s.steps,
            batch_size: s.batch_size,
            optimizer: s.optimizer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    Pretrain(PretrainConfig),
    ColdStartSft(ColdStartConfig),
    ReasoningRl(RlConfig),
    RejectionSamplingSft(RejectionConfig),
    /// GRPO with a rule-based helpfulness proxy (brevity + format) standing
    /// in for preference-based alignment.
    RlAlignmentProxy(RlConfig),
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Pretrain(_) => "pretrain",
            Stage::ColdStartSft(_) => "cold_start_sft",
            Stage::ReasoningRl(_) => "reasoning_rl",
            Stage::RejectionSamplingSft(_) => "rejection_sampling_sft",
            Stage::RlAlignmentProxy(_) => "rl_alignment_proxy",
        }
    }

    /// The alignment proxy with its default rewards.
    pub fn alignment_proxy() -> Self {
        Stage::RlAlignmentProxy(RlConfig {
            steps: 50,
            rewards: BTreeMap::from([("brevity".into(), 1.0), ("format".into(), 1.0)]),
            ..Default::default()
        })
    }

    fn uses_task(&self) -> bool {
        !matches!(self, Stage::Pretrain(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
    pub task: ArithConfig,
    /// Held-out problems and samples per problem for before/after task
    /// evaluation of post-training stages.
    pub eval_prompts: usize,
    pub eval_samples: usize,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            stages: vec![Stage::Pretrain(PretrainConfig::default())],
            task: ArithConfig::default(),
            eval_prompts: 100,
            eval_samples: 4,
        }
    }
}

/// Inputs a plan runs against.
pub struct PlanContext<'a> {
    pub tokenizer: &'a CharTokenizer,
    pub corpus: Option<&'a Corpus>,
    pub seed: u64,
    pub precision: Precision,
    /// Where a diverging pretraining stage writes its state.
    pub diagnostic_dir: Option<&'a Path>,
}

impl StagePlan {
    /// Checks every stage and the dependencies between them.
    pub fn validate(&self, ctx: &PlanContext) -> Result<()> {
        if self.stages.is_empty() {
            return config_err("stage plan is empty");
        }
        self.task.validate()?;
        let mut rl_seen = false;
        for (i, st) in self.stages.iter().enumerate() {
            let at = |e: crate::Error| crate::Error::Config(format!("stage {i} ({}): {e}", st.name()));
            match st {
                Stage::Pretrain(c) => {
                    c.validate().map_err(at)?;
                    if ctx.corpus.is_none() {
                        return config_err(format!("stage {i} (pretrain) needs a corpus"));
                    }
                }
                Stage::ColdStartSft(c) => {
                    if c.samples == 0 || c.batch_size == 0 {
                        return config_err(format!("stage {i} (cold_start_sft): samples and batch_size must be positive"));
                    }
                    c.optimizer.validate().map_err(at)?;
                }
                Stage::ReasoningRl(c) | Stage::RlAlignmentProxy(c) => {
                    c.validate().map_err(at)?;
                    rl_seen |= matches!(st, Stage::ReasoningRl(_));
                }
                Stage::RejectionSamplingSft(c) => {
                    if !rl_seen {
                        return config_err(format!("stage {i} (rejection_sampling_sft) needs an earlier reasoning_rl stage"));
                    }
                    RewardRegistry::new(&c.rewards).map_err(at)?;
                    if c.prompts == 0 || c.n_per_prompt == 0 || c.batch_size == 0 || c.max_new == 0 {
                        return config_err(format!("stage {i} (rejection_sampling_sft): counts must be positive"));
                    }
                    c.optimizer.validate().map_err(at)?;
                }
            }
            if st.uses_task() {
                ctx.tokenizer.encode(&alphabet()).map_err(|e| {
                    crate::Error::Config(format!("stage {i} ({}): vocabulary cannot express the task: {e}", st.name()))
                })?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub name: &'static str,
    /// Tagged per-step metrics CSV.
    pub csv: String,
    /// Scalar results, e.g. `accuracy_after`.
    pub summary: BTreeMap<String, f64>,
    /// The SFT dataset built by rejection sampling.
    pub records: Option<Vec<SftRecord>>,
}

pub struct PlanReport {
    pub model: ToyModel,
    pub stages: Vec<StageReport>,
}

fn sft_csv(losses: &[f64]) -> String {
    let mut s = String::from("# tinyseek-sft-metrics v1\nstep,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

/// Validates the plan, then runs its stages in order starting from `model`.
/// Stage `i` uses seed `ctx.seed + i`.
pub fn run_stage_plan(plan: &StagePlan, model: ToyModel, ctx: &PlanContext) -> Result<PlanReport> {
    plan.validate(ctx)?;
    let tok = ctx.tokenizer;
    let stop = tok.id("\n");
    let mut model = model;
    let mut reports = Vec::new();
    for (i, st) in plan.stages.iter().enumerate() {
        let seed = ctx.seed.wrapping_add(i as u64);
        let mut summary = BTreeMap::new();
        let mut records = None;
        let policy_of = |m: ToyModel, max_new: usize| LmPolicy { model: m, stop: stop.expect("validated"), max_new };
        let eval = |p: &LmPolicy| evaluate_task(p, tok, &plan.task, plan.eval_prompts, plan.eval_samples, ctx.seed);
        let csv = match st {
            Stage::Pretrain(c) => {
                let corpus = ctx.corpus.expect("validated");
                let mut tr = Trainer::new(model, c.clone(), seed, ctx.precision)?;
                tr.diagnostic_dir = ctx.diagnostic_dir.map(Path::to_path_buf);
                let curve = tr.run(corpus, |_| {})?;
                summary.insert("smoothed_loss".into(), smoothed_loss(&curve, c.smoothing_window));
                model = tr.model;
                metrics_csv(model.cfg.mtp.depth, &curve)
            }
            Stage::ColdStartSft(c) => {
                let data: Vec<SftRecord> = problems(seed, "cold_start", c.samples, &plan.task)
                    .iter()
                    .map(|p| SftRecord { prompt: p.prompt(), completion: p.formatted_completion() })
                    .collect();
                let mut pol = policy_of(model, 32);
                let cfg = SftConfig { steps: c.steps, batch_size: c.batch_size, optimizer: c.optimizer.clone() };
                let losses = sft_train(&mut pol, tok, &data, &cfg, seed, ctx.precision)?;
                summary.insert("final_loss".into(), losses.last().copied().unwrap_or(0.0));
                model = pol.model;
                sft_csv(&losses)
            }
            Stage::ReasoningRl(c) | Stage::RlAlignmentProxy(c) => {
                let mut pol = policy_of(model, c.max_new);
                let before = eval(&pol)?;
                let rows = reasoning_rl(&mut pol, tok, &plan.task, c, seed, ctx.precision)?;
                let after = eval(&pol)?;
                summary.insert("accuracy_before".into(), before.accuracy);
                summary.insert("format_rate_before".into(), before.format_rate);
                summary.insert("accuracy_after".into(), after.accuracy);
                summary.insert("format_rate_after".into(), after.format_rate);
                summary.insert("mean_len_after".into(), after.mean_len);
                if let Some(s) = RlStepMetrics::steps_to_format(&rows, 0.95) {
                    summary.insert("steps_to_format_0.95".into(), s as f64);
                }
                model = pol.model;
                rl_metrics_csv(&rows)
            }
            Stage::RejectionSamplingSft(c) => {
                let registry = RewardRegistry::new(&c.rewards)?;
                let prompts: Vec<String> =
                    problems(seed, "rejection.prompts", c.prompts, &plan.task).iter().map(Problem::prompt).collect();
                let mut pol = policy_of(model, c.max_new);
                let res = rejection_sample(&pol, tok, &prompts, &|p, o| registry.score(p, o), c.n_per_prompt, c.min_reward, seed)?;
                summary.insert("survivor_fraction".into(), res.survivor_fraction());
                summary.insert("records".into(), res.records.len() as f64);
                let csv = if res.records.is_empty() {
                    eprintln!("warning: rejection sampling kept no completions; skipping fine-tuning");
                    sft_csv(&[])
                } else {
                    let cfg = SftConfig { steps: c.steps, batch_size: c.batch_size, optimizer: c.optimizer.clone() };
                    sft_csv(&sft_train(&mut pol, tok, &res.records, &cfg, seed, ctx.precision)?)
                };
                records = Some(res.records);
                model = pol.model;
                csv
            }
        };
        reports.push(StageReport { name: st.name(), csv, summary, records });
    }
    Ok(PlanReport { model, stages: reports })
}
