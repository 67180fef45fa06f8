//! The toy language-model harness: corpora and tokenization, pretraining,
//! rule-based rewards, supervised and rejection-sampled fine-tuning and the
//! multi-stage post-training plan.

pub mod arith;
pub mod corpus;
mod policy;
pub mod pretrain;
pub mod rewards;
pub mod rl;
pub mod sft;
pub mod stages;
pub mod tokenizer;

pub use corpus::Corpus;
pub use policy::LmPolicy;
pub use pretrain::{pretrain, PretrainConfig, PretrainReport, StepMetrics, Trainer};
pub use rewards::RewardRegistry;
pub use sft::{sft_train, SftConfig, SftRecord};
pub use stages::{run_stage_plan, PlanContext, PlanReport, Stage, StagePlan, StageReport};
pub use tokenizer::CharTokenizer;

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ToyModel;

/// Saves a model with its vocabulary.
pub fn save_model(model: &ToyModel, tok: &CharTokenizer, path: &Path) -> Result<()> {
    let mut ck = model.to_checkpoint()?;
    let syms = serde_json::to_string(tok.symbols()).map_err(|e| Error::Format(e.to_string()))?;
    ck.meta.insert("tokenizer".into(), syms);
    ck.save(path)
}

/// Loads a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<(ToyModel, CharTokenizer)> {
    let ck = crate::tensor::Checkpoint::load(path)?;
    let syms: Vec<String> = ck
        .meta("tokenizer")
        .map(serde_json::from_str)
        .transpose()
        .map_err(|e| Error::Format(e.to_string()))?
        .ok_or_else(|| Error::Format(format!("{} has no vocabulary", path.display())))?;
    let tok = CharTokenizer::from_symbols(syms)?;
    let model = ToyModel::from_checkpoint(&ck)?;
    if model.vocab_size() != tok.len() {
        return Err(Error::Format(format!("{}: vocabulary of {} for a model of {}", path.display(), tok.len(), model.vocab_size())));
    }
    Ok((model, tok))
}
