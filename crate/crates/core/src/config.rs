//! Versioned TOML run configuration, validated as a whole before any compute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::lm::arith::{alphabet, pretrain_text};
use crate::lm::corpus::{synthetic_prose, uniform_text};
use crate::lm::{CharTokenizer, Corpus, PlanContext, Stage, StagePlan};
use crate::model::{FfnKind, ModelConfig};
use crate::tensor::Precision;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Word-list prose.
    Prose,
    /// Uniform draws from lowercase letters and space.
    Uniform,
    /// One arithmetic problem per line, some with reasoning tags.
    Arithmetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// UTF-8 text file; takes precedence over `synthetic`.
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticKind>,
    /// Characters of synthetic prose/uniform text, or lines of arithmetic.
    pub size: usize,
    /// Share of arithmetic lines written with reasoning tags.
    pub think_fraction: f64,
    pub val_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { path: None, synthetic: Some(SyntheticKind::Prose), size: 200_000, think_fraction: 0.3, val_fraction: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub precision: Precision,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub plan: StagePlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            precision: Precision::F64,
            output_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            model: ModelConfig { ffn: FfnKind::Moe, ..Default::default() },
            plan: StagePlan::default(),
        }
    }
}

/// Corpus and vocabulary resolved from a [`RunConfig`].
pub struct Resolved {
    pub corpus: Option<Corpus>,
    pub tokenizer: CharTokenizer,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return config_err(format!("config version {} is not supported (expected {CONFIG_VERSION})", cfg.version));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    fn uses_task(&self) -> bool {
        self.plan.stages.iter().any(|s| !matches!(s, Stage::Pretrain(_)))
    }

    fn corpus_text(&self) -> Result<Option<String>> {
        let c = &self.corpus;
        if let Some(p) = &c.path {
            return std::fs::read_to_string(p)
                .map(Some)
                .map_err(|e| Error::Config(format!("cannot read corpus file {}: {e}", p.display())));
        }
        let letters: Vec<char> = "abcdefghijklmnopqrstuvwxyz ".chars().collect();
        Ok(c.synthetic.map(|k| match k {
            SyntheticKind::Prose => synthetic_prose(self.seed, c.size),
            SyntheticKind::Uniform => uniform_text(self.seed, c.size, &letters),
            SyntheticKind::Arithmetic => pretrain_text(self.seed, c.size, c.think_fraction, &self.plan.task),
        }))
    }

    /// Builds the corpus and vocabulary and validates everything.
    pub fn resolve(&self) -> Result<Resolved> {
        if self.version != CONFIG_VERSION {
            return config_err(format!("config version {} is not supported", self.version));
        }
        if !(0.0..=1.0).contains(&self.corpus.think_fraction) {
            return config_err("corpus.think_fraction must lie in [0, 1]");
        }
        let text = self.corpus_text()?;
        if text.as_deref() == Some("") {
            return config_err("corpus is empty");
        }
        let mut sources: Vec<&str> = text.iter().map(String::as_str).collect();
        let task = alphabet();
        if self.uses_task() {
            sources.push(&task);
        }
        if sources.is_empty() {
            return config_err("no corpus configured and no post-training stage defines a vocabulary");
        }
        let tokenizer = CharTokenizer::build(sources);
        let corpus = text
            .map(|t| Corpus::with_tokenizer(&t, tokenizer.clone(), self.corpus.val_fraction))
            .transpose()
            .map_err(|e| Error::Config(format!("corpus: {e}")))?;
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = tokenizer.len();
        } else if model.vocab_size != tokenizer.len() {
            return config_err(format!("model.vocab_size = {} but the corpus vocabulary has {}", model.vocab_size, tokenizer.len()));
        }
        model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        let ctx = PlanContext { tokenizer: &tokenizer, corpus: corpus.as_ref(), seed: self.seed, precision: self.precision, diagnostic_dir: None };
        self.plan.validate(&ctx)?;
        Ok(Resolved { corpus, tokenizer, model })
    }
}
