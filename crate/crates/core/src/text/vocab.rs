use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const REPEAT: usize = 4;
pub const COLON: usize = 5;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<eos>", "SEP", "Repeat", ":"];

/// Dense word-level vocabulary. Reserved tokens take ids `0..RESERVED.len()`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens first, then corpus words in order of first occurrence.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut v = Self { tokens: Vec::new(), index: HashMap::new() };
        for r in RESERVED {
            v.push(r.to_string());
        }
        for text in corpus {
            for w in text.as_ref().split_whitespace() {
                let w = w.to_lowercase();
                if !v.index.contains_key(&w) && !RESERVED.contains(&w.as_str()) {
                    v.push(w);
                }
            }
        }
        v
    }

    fn push(&mut self, tok: String) {
        self.index.insert(tok.clone(), self.tokens.len());
        self.tokens.push(tok);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w).ok_or_else(|| Error::Oov(w.to_string()))).collect()
    }

    /// Joins tokens with single spaces. Reserved control ids (PAD, BOS, EOS)
    /// are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().filter(|&&i| i > EOS).map(|&i| self.tokens[i].as_str()).collect::<Vec<_>>().join(" ")
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> std::result::Result<Self, String> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err("vocabulary must start with the reserved tokens".into());
        }
        let mut v = Self { tokens: Vec::new(), index: HashMap::new() };
        for t in tokens {
            if v.index.contains_key(&t) {
                return Err(format!("duplicate token `{t}`"));
            }
            v.push(t);
        }
        Ok(v)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
