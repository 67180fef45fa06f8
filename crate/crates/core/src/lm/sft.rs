//! Supervised fine-tuning on (prompt, completion) records.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::policy::LmPolicy;
use super::tokenizer::CharTokenizer;
use crate::error::{contract, Error, Result};
use crate::grpo::Policy;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::rng::indexed_stream;
use crate::tensor::{Precision, Tape};

pub const SFT_FORMAT: &str = "tinyseek-sft";
pub const SFT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub completion: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

/// Line-delimited JSON: a format header, then one record per line.
pub fn write_sft(path: &Path, records: &[SftRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", to_line(&Header { format: SFT_FORMAT.into(), version: SFT_VERSION })?)?;
    for r in records {
        writeln!(f, "{}", to_line(r)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_sft(path: &Path) -> Result<Vec<SftRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let head = lines.next().ok_or_else(|| Error::Format(format!("{} is empty", path.display())))??;
    let h: Header = serde_json::from_str(&head).map_err(|e| Error::Format(format!("{}: header: {e}", path.display())))?;
    if h.format != SFT_FORMAT || h.version != SFT_VERSION {
        return Err(Error::Format(format!("{}: expected {SFT_FORMAT} v{SFT_VERSION}", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(&l?).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 2)))
        })
        .collect()
}

fn to_line<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { steps: 200, batch_size: 16, optimizer: AdamConfig { lr: 1e-3, warmup_steps: 20, ..Default::default() } }
    }
}

/// Minimizes completion-token cross-entropy; returns the loss per step.
pub fn sft_train(
    policy: &mut LmPolicy,
    tok: &CharTokenizer,
    records: &[SftRecord],
    cfg: &SftConfig,
    seed: u64,
    precision: Precision,
) -> Result<Vec<f64>> {
    if records.is_empty() {
        return contract("no SFT records");
    }
    cfg.optimizer.validate()?;
    let encoded = records
        .iter()
        .map(|r| Ok((tok.encode(&r.prompt)?, tok.encode(&r.completion)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(cfg.optimizer.clone(), &policy.model.store);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = indexed_stream(seed, "sft.batch", step as u64);
        let picks: Vec<&(Vec<usize>, Vec<usize>)> =
            (0..cfg.batch_size).map(|_| &encoded[rng.random_range(0..encoded.len())]).collect();
        let pairs: Vec<(&[usize], &[usize])> = picks.iter().map(|(q, o)| (q.as_slice(), o.as_slice())).collect();
        let targets: Vec<usize> = picks.iter().flat_map(|(_, o)| o.iter().copied()).collect();
        let tape = Tape::with_precision(precision);
        let p = policy.model.store.bind(&tape);
        let loss = policy.output_log_probs(&p, &pairs)?.pick_per_row(&targets)?.mean().neg();
        let v = loss.item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("SFT loss is {v} at step {step}")));
        }
        loss.backward()?;
        opt.step(&mut policy.model.store, &p.grads(), precision)?;
        losses.push(v);
    }
    Ok(losses)
}
