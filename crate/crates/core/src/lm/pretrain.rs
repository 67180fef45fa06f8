//! Next-token pretraining with optional depth losses and router updates.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use crate::error::{config_err, Error, Result};
use crate::model::ToyModel;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Checkpoint, Precision, Tape};

pub const PRETRAIN_METRICS_TAG: &str = "# tinyseek-pretrain-metrics v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Tokens per training window, excluding the extra target token.
    pub seq_len: usize,
    pub optimizer: AdamConfig,
    /// Window of the trailing mean reported as the smoothed loss.
    pub smoothing_window: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            seq_len: 64,
            optimizer: AdamConfig::default(),
            smoothing_window: 100,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return config_err("batch_size and seq_len must be positive");
        }
        if self.smoothing_window == 0 {
            return config_err("smoothing_window must be positive");
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub main: f64,
    pub mtp: Vec<f64>,
    pub aux: f64,
    pub grad_norm: f64,
    /// Largest max/mean routed-expert load over the MoE sublayers (0 when dense).
    pub load_ratio: f64,
}

/// Header for a run whose model has `depth` prediction modules.
pub fn metrics_header(depth: usize) -> String {
    let mut h = String::from("step,lr,loss,loss_main");
    for k in 1..=depth {
        write!(h, ",loss_mtp_{k}").unwrap();
    }
    h.push_str(",aux,grad_norm,load_ratio");
    h
}

pub fn metrics_row(m: &StepMetrics) -> String {
    let mut r = format!("{},{},{},{}", m.step, m.lr, m.loss, m.main);
    for v in &m.mtp {
        write!(r, ",{v}").unwrap();
    }
    write!(r, ",{},{},{}", m.aux, m.grad_norm, m.load_ratio).unwrap();
    r
}

/// Tagged CSV of a whole curve.
pub fn metrics_csv(depth: usize, rows: &[StepMetrics]) -> String {
    let mut s = format!("{PRETRAIN_METRICS_TAG}\n{}\n", metrics_header(depth));
    for m in rows {
        s.push_str(&metrics_row(m));
        s.push('\n');
    }
    s
}

/// Mean main loss over the last `window` steps.
pub fn smoothed_loss(rows: &[StepMetrics], window: usize) -> f64 {
    let tail = &rows[rows.len().saturating_sub(window)..];
    tail.iter().map(|m| m.main).sum::<f64>() / tail.len().max(1) as f64
}

/// Model, optimizer state and step counter of a pretraining run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ToyModel,
    pub opt: Adam,
    pub cfg: PretrainConfig,
    pub seed: u64,
    pub precision: Precision,
    /// Where a diverging run leaves its state at the failing step.
    pub diagnostic_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: ToyModel, cfg: PretrainConfig, seed: u64, precision: Precision) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(cfg.optimizer.clone(), &model.store);
        Ok(Self { model, opt, cfg, seed, precision, diagnostic_dir: None })
    }

    pub fn step(&self) -> u64 {
        self.opt.steps_taken()
    }

    /// One optimizer step on batch number `self.step()`.
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<StepMetrics> {
        let step = self.step();
        let batch = corpus.batch(self.seed, step, self.cfg.batch_size, self.cfg.seq_len)?;
        let tape = Tape::with_precision(self.precision);
        let p = self.model.store.bind(&tape);
        let parts = match self.model.loss(&batch, &p) {
            Ok(parts) => parts,
            Err(Error::Numeric(m)) => return Err(self.diverged(step, m)),
            Err(e) => return Err(e),
        };
        let loss = parts.total.item();
        if !loss.is_finite() {
            return Err(self.diverged(step, format!("loss is {loss}")));
        }
        parts.total.backward()?;
        let info = match self.opt.step(&mut self.model.store, &p.grads(), self.precision) {
            Ok(i) => i,
            Err(Error::Numeric(m)) => return Err(self.diverged(step, m)),
            Err(e) => return Err(e),
        };
        self.model.update_routers(&parts.stats)?;
        Ok(StepMetrics {
            step: step + 1,
            lr: info.lr,
            loss,
            main: parts.main,
            mtp: parts.mtp,
            aux: parts.aux,
            grad_norm: info.grad_norm,
            load_ratio: parts.stats.iter().map(|s| s.max_mean_ratio()).fold(0.0, f64::max),
        })
    }

    fn diverged(&self, step: u64, what: String) -> Error {
        let mut msg = format!("training diverged at step {}: {what}", step + 1);
        if let Some(dir) = &self.diagnostic_dir {
            let path = dir.join("diverged.ckpt");
            match self.checkpoint().and_then(|ck| ck.save(&path)) {
                Ok(()) => write!(msg, "; state saved to {}", path.display()).unwrap(),
                Err(e) => write!(msg, "; diagnostic checkpoint failed: {e}").unwrap(),
            }
        }
        Error::Numeric(msg)
    }

    /// Runs until `self.cfg.steps` optimizer steps have been taken.
    pub fn run(&mut self, corpus: &Corpus, mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut rows = Vec::new();
        while self.step() < self.cfg.steps {
            let m = self.train_step(corpus)?;
            on_step(&m);
            rows.push(m);
        }
        Ok(rows)
    }

    /// Model tensors, optimizer moments and run identity.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint()?;
        self.opt.save_into(&mut ck, &self.model.store);
        ck.meta.insert("trainer.seed".into(), self.seed.to_string());
        let cfg = serde_json::to_string(&self.cfg).map_err(|e| Error::Format(e.to_string()))?;
        ck.meta.insert("trainer.config".into(), cfg);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, precision: Precision) -> Result<Self> {
        let model = ToyModel::from_checkpoint(ck)?;
        let seed = ck
            .meta("trainer.seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("checkpoint has no trainer state".into()))?;
        let cfg: PretrainConfig = ck
            .meta("trainer.config")
            .map(serde_json::from_str)
            .transpose()
            .map_err(|e| Error::Format(e.to_string()))?
            .ok_or_else(|| Error::Format("checkpoint has no trainer config".into()))?;
        let opt = Adam::load_from(cfg.optimizer.clone(), ck, &model.store)?;
        Ok(Self { model, opt, cfg, seed, precision, diagnostic_dir: None })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub model: ToyModel,
    pub curve: Vec<StepMetrics>,
    pub smoothed_loss: f64,
}

impl PretrainReport {
    pub fn csv(&self) -> String {
        metrics_csv(self.model.cfg.mtp.depth, &self.curve)
    }
}

/// Trains `model` on `corpus` for `cfg.steps` steps.
pub fn pretrain(model: ToyModel, corpus: &Corpus, cfg: &PretrainConfig, seed: u64, precision: Precision) -> Result<PretrainReport> {
    if corpus.train().is_empty() {
        return crate::error::contract("corpus has no training tokens");
    }
    let mut tr = Trainer::new(model, cfg.clone(), seed, precision)?;
    let curve = tr.run(corpus, |_| {})?;
    let smoothed = smoothed_loss(&curve, cfg.smoothing_window);
    Ok(PretrainReport { model: tr.model, curve, smoothed_loss: smoothed })
}

/// Mean next-token cross-entropy over fixed validation windows.
pub fn validation_loss(model: &ToyModel, corpus: &Corpus, batches: usize, seq_len: usize, seed: u64) -> Result<f64> {
    let windows = corpus.validation_batch(seed, batches, seq_len)?;
    let tape = Tape::new();
    let p = model.store.bind_frozen(&tape);
    let b = windows.len();
    let t = seq_len;
    let inputs: Vec<usize> = windows.iter().flat_map(|s| s[..t].iter().copied()).collect();
    let targets: Vec<usize> = windows.iter().flat_map(|s| s[1..].iter().copied()).collect();
    let trunk = model.trunk(&inputs, t, &p)?;
    let ce = model.logits(&trunk.h, &p)?.cross_entropy(&targets)?.item();
    debug_assert_eq!(targets.len(), b * t);
    Ok(ce)
}
