use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const BOS: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[MASK]", "[BOS]"];
pub const MASK_LITERAL: &str = "[MASK]";

/// Lowercased word tokenizer. Alphanumeric runs are words, every other
/// non-whitespace character is its own token, and the literal `[MASK]` is kept
/// intact.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = text;
    while let Some(ch) = rest.chars().next() {
        if rest.starts_with(MASK_LITERAL) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(MASK_LITERAL.to_string());
            rest = &rest[MASK_LITERAL.len()..];
            continue;
        }
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
        rest = &rest[ch.len_utf8()..];
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token ↔ id map. Ids 0..4 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds a vocabulary from raw text. Tokens seen fewer than `min_count`
    /// times are left out and later encode to `UNK`. Ids are assigned by
    /// descending frequency, ties broken lexicographically.
    pub fn build(corpus: &[impl AsRef<str>], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in tokenize(line.as_ref()) {
                if !SPECIAL_TOKENS.contains(&tok.as_str()) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        if tokens.len() < 5 {
            return Err(Error::invalid(
                "vocabulary would contain no regular tokens; lower min_count",
            ));
        }
        Ok(Self::from(tokens))
    }

    /// Appends tokens that are not yet present, in the given order.
    pub fn extend<S: AsRef<str>>(&mut self, tokens: impl IntoIterator<Item = S>) {
        for t in tokens {
            let t = t.as_ref();
            if !self.index.contains_key(t) {
                self.index.insert(t.to_string(), self.tokens.len());
                self.tokens.push(t.to_string());
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_tokens(&tokenize(text))
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect()
    }

    /// Tokens of `other` that are missing here.
    pub fn missing_from(&self, other: &Vocabulary) -> Vec<String> {
        other
            .tokens
            .iter()
            .filter(|t| !self.index.contains_key(*t))
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_words_and_punctuation() {
        assert_eq!(
            tokenize("Hello, World! answer: [MASK]"),
            vec!["hello", ",", "world", "!", "answer", ":", "[MASK]"]
        );
        assert_eq!(tokenize("  "), Vec::<String>::new());
    }

    #[test]
    fn build_examples() {
        let v = Vocabulary::build(&["a b", "b c"], 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(4), Some("b"));
        assert_eq!(v.token(5), Some("a"));
        assert_eq!(v.token(6), Some("c"));

        let v2 = Vocabulary::build(&["a b", "b c"], 2).unwrap();
        assert_eq!(v2.len(), 5);
        assert_eq!(v2.id("b"), Some(4));
        assert_eq!(v2.encode("b z"), vec![4, UNK]);
        assert_eq!(v2.encode("a"), vec![UNK]);
    }

    #[test]
    fn empty_corpus_errors() {
        let empty: [&str; 0] = [];
        assert!(Vocabulary::build(&empty, 1).is_err());
    }

    #[test]
    fn specials_are_reserved() {
        let v = Vocabulary::build(&["x [MASK] y"], 1).unwrap();
        assert_eq!(&v.tokens()[..4], &SPECIAL_TOKENS.map(String::from));
        assert_eq!(v.encode("[MASK]"), vec![MASK]);
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::build(&["the cat sat on the mat"], 1).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }
}
