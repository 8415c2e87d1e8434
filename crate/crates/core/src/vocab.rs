//! Caption tokenization and the token/id vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Lowercase and split on whitespace. Used by both the decoder and the metrics.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary ordered by frequency (descending), then
    /// lexicographically. Words seen fewer than `min_freq` times map to `<unk>`.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for c in captions {
            any = true;
            for w in tokenize(c) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        if !any || counts.is_empty() {
            return Err(Error::EmptyInput("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, n)| *n >= min_freq.max(1) && !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(words.into_iter().map(|(w, _)| w)).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Format(format!("vocabulary must start with {RESERVED:?}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary token {t:?} at line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Word ids of a caption, without `<start>`/`<end>`.
    pub fn encode(&self, caption: &str) -> Vec<usize> {
        tokenize(caption).iter().map(|w| self.id(w)).collect()
    }

    /// Joins word ids, stopping at `<end>` and skipping `<pad>`/`<start>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out: Vec<&str> = Vec::new();
        for &i in ids {
            match i {
                END => break,
                PAD | START => {}
                _ => out.push(self.token(i).unwrap_or(RESERVED[UNK])),
            }
        }
        out.join(" ")
    }

    /// One token per line, reserved tokens first.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic() {
        let v = Vocab::build(["a b", "b c"], 1).unwrap();
        assert_eq!(&v.tokens()[4..], &["b", "a", "c"]);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("zebra"), UNK);
    }

    #[test]
    fn round_trip_and_text_form() {
        let caps = ["A Road appears", "the scene is the same"];
        let v = Vocab::build(caps, 1).unwrap();
        for c in caps {
            assert_eq!(v.decode(&v.encode(c)), c.to_lowercase());
        }
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("a\nb\n").is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocab::build(std::iter::empty(), 1).is_err());
        assert!(Vocab::build(["   "], 1).is_err());
    }
}
