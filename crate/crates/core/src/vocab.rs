use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const BOS: usize = 3;
pub const EOS: usize = 4;
pub const NUM_SPECIAL: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[MASK]", "[BOS]", "[EOS]"];

/// Word ↔ id map with fixed special ids `0..5`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    min_freq: usize,
    words: Vec<String>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_words(r.words, r.min_freq)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            min_freq: v.min_freq,
            words: v.words,
        }
    }
}

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIAL
}

impl Vocabulary {
    fn from_words(words: Vec<String>, min_freq: usize) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary {
            words,
            index,
            min_freq,
        }
    }

    /// Assigns ids to every word with frequency ≥ `min_freq`, ordered by
    /// frequency (descending) then lexicographically.
    pub fn build<'a, I>(sentences: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [Token]>,
    {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        let mut any = false;
        for s in sentences {
            any = true;
            for t in s {
                *freq.entry(t.as_str()).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::EmptyCorpus);
        }
        let mut entries: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && !SPECIAL_TOKENS.contains(w))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Ok(Self::from_words(words, min_freq))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn encode(&self, tokens: &[Token]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }
}
