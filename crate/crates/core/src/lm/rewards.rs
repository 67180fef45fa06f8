//! Rule-based rewards and a name-keyed registry combining them.

use std::collections::BTreeMap;

use super::arith::Problem;
use super::tokenizer::{THINK_CLOSE, THINK_OPEN};
use crate::error::{config_err, Result};

fn strip_terminator(completion: &str) -> &str {
    completion.strip_suffix('\n').unwrap_or(completion)
}

/// Text after the closing tag, or the whole completion when untagged.
pub fn extract_answer(completion: &str) -> &str {
    let c = strip_terminator(completion);
    match c.rfind(THINK_CLOSE) {
        Some(i) => &c[i + THINK_CLOSE.len()..],
        None => c,
    }
    .trim()
}

/// 1 when the final answer equals the ground truth of `prompt`.
pub fn reward_accuracy(prompt: &str, completion: &str) -> f64 {
    let Some(p) = Problem::parse(prompt) else { return 0.0 };
    match extract_answer(completion).parse::<i64>() {
        Ok(v) if v == p.answer() => 1.0,
        _ => 0.0,
    }
}

/// The reasoning span of a well-formed completion.
pub fn think_span(completion: &str) -> Option<&str> {
    let c = strip_terminator(completion);
    let body = c.strip_prefix(THINK_OPEN)?;
    let end = body.find(THINK_CLOSE)?;
    Some(&body[..end])
}

/// 1 for exactly one leading `<think>…</think>` pair followed by a nonempty
/// answer.
pub fn reward_format(completion: &str) -> f64 {
    let c = strip_terminator(completion);
    if c.matches(THINK_OPEN).count() != 1 || c.matches(THINK_CLOSE).count() != 1 {
        return 0.0;
    }
    let Some(span) = think_span(c) else { return 0.0 };
    let answer = &c[THINK_OPEN.len() + span.len() + THINK_CLOSE.len()..];
    if answer.trim().is_empty() || answer.contains('\n') {
        return 0.0;
    }
    1.0
}

/// Share of reasoning-span characters in `charset`; 0 without a span.
pub fn reward_language_consistency(completion: &str, charset: &str) -> f64 {
    let Some(span) = think_span(completion) else { return 0.0 };
    let n = span.chars().count();
    if n == 0 {
        return 0.0;
    }
    span.chars().filter(|c| charset.contains(*c)).count() as f64 / n as f64
}

/// Helpfulness proxy: 1 for an answer of at most `target` characters,
/// falling linearly to 0 at `4 · target`.
pub fn reward_brevity(completion: &str, target: usize) -> f64 {
    let n = strip_terminator(completion).chars().count() as f64;
    let t = target.max(1) as f64;
    (1.0 - (n - t).max(0.0) / (3.0 * t)).clamp(0.0, 1.0)
}

/// Characters the language-consistency reward counts as on-target for the
/// arithmetic task.
pub const ARITH_CHARSET: &str = "0123456789+-=";

pub const REWARD_NAMES: [&str; 4] = ["accuracy", "format", "language", "brevity"];

/// Weighted sum of named rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardRegistry {
    weights: BTreeMap<String, f64>,
    pub charset: String,
    pub brevity_target: usize,
}

impl RewardRegistry {
    pub fn new(weights: &BTreeMap<String, f64>) -> Result<Self> {
        if weights.is_empty() {
            return config_err("reward registry is empty");
        }
        for (name, w) in weights {
            if !REWARD_NAMES.contains(&name.as_str()) {
                return config_err(format!("unknown reward {name:?}; known: {}", REWARD_NAMES.join(", ")));
            }
            if !w.is_finite() {
                return config_err(format!("reward weight for {name} is not finite"));
            }
        }
        Ok(Self { weights: weights.clone(), charset: ARITH_CHARSET.into(), brevity_target: 8 })
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }

    pub fn component(&self, name: &str, prompt: &str, completion: &str) -> f64 {
        match name {
            "accuracy" => reward_accuracy(prompt, completion),
            "format" => reward_format(completion),
            "language" => reward_language_consistency(completion, &self.charset),
            "brevity" => reward_brevity(completion, self.brevity_target),
            _ => 0.0,
        }
    }

    pub fn score(&self, prompt: &str, completion: &str) -> f64 {
        self.weights.iter().map(|(n, w)| w * self.component(n, prompt, completion)).sum()
    }
}
