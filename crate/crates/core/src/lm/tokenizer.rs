//! Character vocabulary with the two reasoning tags as atomic symbols.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

/// Sorted, deduplicated characters plus the reserved tags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharTokenizer {
    symbols: Vec<String>,
}

impl CharTokenizer {
    /// Vocabulary of every character in `texts`, tags included.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut chars = std::collections::BTreeSet::new();
        for t in texts {
            for piece in split_tags(t) {
                if let Piece::Char(c) = piece {
                    chars.insert(c);
                }
            }
        }
        let mut symbols: Vec<String> = chars.into_iter().map(String::from).collect();
        symbols.push(THINK_OPEN.into());
        symbols.push(THINK_CLOSE.into());
        Self { symbols }
    }

    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &symbols {
            let atomic = s == THINK_OPEN || s == THINK_CLOSE || s.chars().count() == 1;
            if !atomic || !seen.insert(s.as_str()) {
                return Err(Error::Format(format!("invalid vocabulary symbol {s:?}")));
            }
        }
        Ok(Self { symbols })
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn think_open(&self) -> usize {
        self.id(THINK_OPEN).expect("reserved tag")
    }

    pub fn think_close(&self) -> usize {
        self.id(THINK_CLOSE).expect("reserved tag")
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        split_tags(text)
            .map(|p| {
                let s = match p {
                    Piece::Char(c) => c.to_string(),
                    Piece::Tag(t) => t.to_string(),
                };
                self.id(&s)
                    .ok_or_else(|| Error::Format(format!("symbol {s:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.symbols.get(i).map_or("\u{fffd}", |s| s.as_str())).collect()
    }
}

enum Piece {
    Char(char),
    Tag(&'static str),
}

fn split_tags(text: &str) -> impl Iterator<Item = Piece> + '_ {
    let mut rest = text;
    std::iter::from_fn(move || {
        for tag in [THINK_OPEN, THINK_CLOSE] {
            if let Some(r) = rest.strip_prefix(tag) {
                rest = r;
                return Some(Piece::Tag(tag));
            }
        }
        let c = rest.chars().next()?;
        rest = &rest[c.len_utf8()..];
        Some(Piece::Char(c))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_are_atomic() {
        let tok = CharTokenizer::build(["ab<think>c</think>"]);
        assert_eq!(tok.symbols(), &["a", "b", "c", THINK_OPEN, THINK_CLOSE]);
        let ids = tok.encode("<think>ab</think>c").unwrap();
        assert_eq!(ids, vec![3, 0, 1, 4, 2]);
        assert_eq!(tok.decode(&ids), "<think>ab</think>c");
        assert!(tok.encode("z").is_err());
    }
}
