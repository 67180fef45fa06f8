//! Seeded addition/subtraction problems with generator-computed answers.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::tokenizer::{THINK_CLOSE, THINK_OPEN};
use crate::error::{config_err, Result};
use crate::tensor::rng::{indexed_stream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArithConfig {
    /// Operands have 1 to `max_digits` digits.
    pub max_digits: u32,
    pub allow_subtraction: bool,
}

impl Default for ArithConfig {
    fn default() -> Self {
        Self { max_digits: 3, allow_subtraction: true }
    }
}

impl ArithConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.max_digits) {
            return config_err(format!("max_digits = {} must be 1, 2 or 3", self.max_digits));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Problem {
    pub a: i64,
    pub b: i64,
    pub subtract: bool,
}

impl Problem {
    pub fn sample(rng: &mut Rng, cfg: &ArithConfig) -> Self {
        let operand = |rng: &mut Rng| {
            let digits = rng.random_range(1..=cfg.max_digits);
            let lo = if digits == 1 { 0 } else { 10i64.pow(digits - 1) };
            rng.random_range(lo..10i64.pow(digits))
        };
        let a = operand(rng);
        let b = operand(rng);
        let subtract = cfg.allow_subtraction && rng.random_range(0..2) == 1;
        Self { a, b, subtract }
    }

    pub fn answer(&self) -> i64 {
        if self.subtract {
            self.a - self.b
        } else {
            self.a + self.b
        }
    }

    /// `"12+7="`
    pub fn prompt(&self) -> String {
        format!("{}{}{}=", self.a, if self.subtract { '-' } else { '+' }, self.b)
    }

    /// Parses a prompt produced by [`Problem::prompt`].
    pub fn parse(prompt: &str) -> Option<Self> {
        let body = prompt.strip_suffix('=')?;
        let (i, subtract) = body
            .char_indices()
            .skip(1)
            .find_map(|(i, c)| match c {
                '+' => Some((i, false)),
                '-' => Some((i, true)),
                _ => None,
            })?;
        let a = body[..i].parse().ok()?;
        let b = body[i + 1..].parse().ok()?;
        Some(Self { a, b, subtract })
    }

    /// Template reasoning: the operation restated with its result.
    pub fn reasoning(&self) -> String {
        format!("{}{}{}={}", self.a, if self.subtract { '-' } else { '+' }, self.b, self.answer())
    }

    /// `"<think>12+7=19</think>19\n"`
    pub fn formatted_completion(&self) -> String {
        format!("{THINK_OPEN}{}{THINK_CLOSE}{}\n", self.reasoning(), self.answer())
    }

    /// `"19\n"`
    pub fn bare_completion(&self) -> String {
        format!("{}\n", self.answer())
    }
}

/// `n` problems drawn from stream `(seed, label)`.
pub fn problems(seed: u64, label: &str, n: usize, cfg: &ArithConfig) -> Vec<Problem> {
    let mut rng = crate::tensor::rng::stream(seed, label);
    (0..n).map(|_| Problem::sample(&mut rng, cfg)).collect()
}

/// Pretraining text: one problem per line, a `think_fraction` share of them
/// with reasoning tags and the rest answered directly.
pub fn pretrain_text(seed: u64, lines: usize, think_fraction: f64, cfg: &ArithConfig) -> String {
    let mut out = String::new();
    for i in 0..lines {
        let mut rng = indexed_stream(seed, "arith.pretrain", i as u64);
        let p = Problem::sample(&mut rng, cfg);
        out.push_str(&p.prompt());
        if rng.random::<f64>() < think_fraction {
            out.push_str(&p.formatted_completion());
        } else {
            out.push_str(&p.bare_completion());
        }
    }
    out
}

/// Every symbol the task can emit, for building a vocabulary.
pub fn alphabet() -> String {
    format!("0123456789+-=\n{THINK_OPEN}{THINK_CLOSE}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_round_trip() {
        let cfg = ArithConfig::default();
        for p in problems(3, "t", 200, &cfg) {
            assert_eq!(Problem::parse(&p.prompt()), Some(p));
            assert!(p.a < 1000 && p.b < 1000);
        }
        assert_eq!(Problem { a: 12, b: 7, subtract: false }.formatted_completion(), "<think>12+7=19</think>19\n");
        assert_eq!(Problem { a: 3, b: 7, subtract: true }.bare_completion(), "-4\n");
        assert_eq!(Problem::parse("3-7="), Some(Problem { a: 3, b: 7, subtract: true }));
        assert_eq!(Problem::parse("3*7="), None);
    }
}
