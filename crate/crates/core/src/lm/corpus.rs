//! Text corpora, train/validation split and batch sampling.

use std::path::Path;

use rand::RngExt;

use super::tokenizer::CharTokenizer;
use crate::error::{contract, Error, Result};
use crate::tensor::rng::{indexed_stream, stream};

#[derive(Clone, Debug)]
pub struct Corpus {
    pub tokenizer: CharTokenizer,
    pub tokens: Vec<usize>,
    /// Tokens `[0, split)` train, `[split, len)` validate.
    pub split: usize,
}

impl Corpus {
    /// Tokenizes `text` with its own vocabulary and holds out the last
    /// `val_fraction` of it.
    pub fn from_text(text: &str, val_fraction: f64) -> Result<Self> {
        Self::with_tokenizer(text, CharTokenizer::build([text]), val_fraction)
    }

    pub fn with_tokenizer(text: &str, tokenizer: CharTokenizer, val_fraction: f64) -> Result<Self> {
        if text.is_empty() {
            return contract("corpus is empty");
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!("val_fraction = {val_fraction} must lie in [0, 1)")));
        }
        let tokens = tokenizer.encode(text)?;
        let split = tokens.len() - (tokens.len() as f64 * val_fraction) as usize;
        Ok(Self { tokenizer, tokens, split })
    }

    pub fn from_file(path: &Path, val_fraction: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_text(&text, val_fraction)
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.split]
    }

    pub fn validation(&self) -> &[usize] {
        &self.tokens[self.split..]
    }

    /// `b` random windows of `t + 1` training tokens for step `step`.
    pub fn batch(&self, seed: u64, step: u64, b: usize, t: usize) -> Result<Vec<Vec<usize>>> {
        windows(self.train(), &mut indexed_stream(seed, "corpus.batch", step), b, t)
    }

    /// A fixed set of validation windows.
    pub fn validation_batch(&self, seed: u64, b: usize, t: usize) -> Result<Vec<Vec<usize>>> {
        windows(self.validation(), &mut stream(seed, "corpus.validation"), b, t)
    }
}

fn windows(src: &[usize], rng: &mut crate::tensor::rng::Rng, b: usize, t: usize) -> Result<Vec<Vec<usize>>> {
    if src.len() < t + 1 {
        return contract(format!("{} tokens cannot fill a window of {}", src.len(), t + 1));
    }
    Ok((0..b)
        .map(|_| {
            let s = rng.random_range(0..=src.len() - t - 1);
            src[s..s + t + 1].to_vec()
        })
        .collect())
}

const WORDS: &[&str] = &[
    "the", "of", "and", "a", "to", "in", "is", "was", "he", "for", "it", "with", "as", "his", "on", "be", "at", "by",
    "had", "are", "but", "from", "or", "have", "an", "they", "which", "one", "you", "were", "her", "all", "she",
    "there", "would", "their", "we", "him", "been", "has", "when", "who", "will", "more", "no", "if", "out", "so",
    "said", "what", "up", "its", "about", "into", "than", "them", "can", "only", "other", "new", "some", "could",
    "time", "these", "two", "may", "then", "do", "first", "any", "my", "now", "such", "like", "our", "over", "man",
    "me", "even", "most", "made", "after", "also", "did", "many", "before", "must", "through", "back", "years",
    "where", "much", "your", "way", "well", "down", "should", "because", "each", "just", "those", "people", "how",
    "too", "little", "state", "good", "very", "make", "world", "still", "own", "see", "men", "work", "long", "get",
    "here", "between", "both", "life", "being", "under", "never", "day", "same", "another", "know", "while", "last",
    "might", "us", "great", "old", "year", "off", "come", "since", "against", "go", "came", "right", "used", "take",
    "three", "house", "water", "river", "light", "small", "night", "road", "morning", "garden", "window", "door",
    "voice", "quiet", "letter", "mountain", "village", "winter", "summer", "bread", "table", "friend", "story",
];

/// English-like prose: Zipf-weighted words from a fixed list, sentences of
/// 5 to 14 words, capitalized, with commas and full stops.
pub fn synthetic_prose(seed: u64, chars: usize) -> String {
    let mut rng = stream(seed, "corpus.prose");
    let weights: Vec<f64> = (1..=WORDS.len()).map(|r| 1.0 / r as f64).collect();
    let mut out = String::with_capacity(chars + 64);
    while out.len() < chars {
        let n = rng.random_range(5..15);
        for i in 0..n {
            let w = WORDS[crate::tensor::rng::categorical(&weights, &mut rng)];
            if i == 0 {
                let mut c = w.chars();
                let first = c.next().unwrap().to_ascii_uppercase();
                out.push(first);
                out.push_str(c.as_str());
            } else {
                out.push_str(w);
            }
            if i + 1 < n {
                out.push_str(if rng.random_range(0..8) == 0 { ", " } else { " " });
            }
        }
        out.push_str(if rng.random_range(0..6) == 0 { ".\n" } else { ". " });
    }
    out.truncate(chars);
    out
}

/// Independent uniform draws from `alphabet`.
pub fn uniform_text(seed: u64, chars: usize, alphabet: &[char]) -> String {
    let mut rng = stream(seed, "corpus.uniform");
    (0..chars).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}
