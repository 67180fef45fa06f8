//! The toy model as a sampling policy over completions.

use crate::error::{contract, Result};
use crate::grpo::Policy;
use crate::model::ToyModel;
use crate::tensor::rng::{categorical, Rng};
use crate::tensor::{softmax_in_place, Bound, ParamStore, Var};

/// A model plus the decoding rule that ends a completion.
#[derive(Clone, Debug)]
pub struct LmPolicy {
    pub model: ToyModel,
    /// Token that terminates a completion; it is part of the output.
    pub stop: usize,
    pub max_new: usize,
}

impl LmPolicy {
    /// Greedy completion of `prompt`.
    pub fn greedy(&self, prompt: &[usize]) -> Result<Vec<usize>> {
        self.generate(prompt, |logits| {
            Ok(logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0)
        })
    }

    fn generate(&self, prompt: &[usize], mut pick: impl FnMut(&mut Vec<f64>) -> Result<usize>) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return contract("prompt is empty");
        }
        let mut cache = self.model.new_cache();
        let mut logits = Vec::new();
        for &t in prompt {
            logits = self.model.step_logits(t, &mut cache)?;
        }
        let mut out = Vec::new();
        loop {
            let next = pick(&mut logits)?;
            out.push(next);
            if next == self.stop || out.len() == self.max_new {
                return Ok(out);
            }
            logits = self.model.step_logits(next, &mut cache)?;
        }
    }
}

impl Policy for LmPolicy {
    fn params(&self) -> &ParamStore {
        &self.model.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }

    fn sample(&self, prompt: &[usize], rng: &mut Rng) -> Result<Vec<usize>> {
        self.generate(prompt, |logits| {
            softmax_in_place(logits);
            Ok(categorical(logits, rng))
        })
    }

    /// Runs every `prompt ++ output[..-1]` as one end-padded batch and
    /// gathers the rows that predict output tokens.
    fn output_log_probs(&self, p: &Bound, pairs: &[(&[usize], &[usize])]) -> Result<Var> {
        if pairs.iter().any(|(q, o)| q.is_empty() || o.is_empty()) {
            return contract("log-probs need nonempty prompts and outputs");
        }
        let len = pairs.iter().map(|(q, o)| q.len() + o.len() - 1).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(len * pairs.len());
        let mut rows = Vec::new();
        for (b, (q, o)) in pairs.iter().enumerate() {
            let seq: Vec<usize> = q.iter().chain(&o[..o.len() - 1]).copied().collect();
            tokens.extend(&seq);
            tokens.extend(std::iter::repeat_n(self.stop, len - seq.len()));
            rows.extend((0..o.len()).map(|j| b * len + q.len() - 1 + j));
        }
        let trunk = self.model.trunk(&tokens, len, p)?;
        let h = trunk.h.gather_rows(&rows)?;
        self.model.logits(&h, p)?.log_softmax_rows()
    }
}
