use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const END_ID: u32 = 2;
const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<end>"];

/// Lowercase, whitespace-split tokenization. Punctuation stays attached to
/// its word so `detokenize(tokenize(s))` is the whitespace-normalized
/// lowercase form of `s`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(|t| t.as_ref())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    min_frequency: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    min_frequency: usize,
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Self::from_tokens(f.tokens, f.min_frequency)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            min_frequency: v.min_frequency,
            tokens: v.id_to_token,
        }
    }
}

impl Vocabulary {
    /// Every token with corpus frequency >= `min_frequency` gets an id after
    /// the reserved ones, ordered by frequency (descending) then lexicographically.
    pub fn build<S: AsRef<str>>(texts: &[S], min_frequency: usize) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for tok in tokenize(t.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("empty corpus".to_string()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, c)| *c >= min_frequency.max(1) && !RESERVED.contains(&tok.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens, min_frequency))
    }

    fn from_tokens(id_to_token: Vec<String>, min_frequency: usize) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            token_to_id,
            id_to_token,
            min_frequency,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Token ids truncated to the first `max_len` tokens.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        tokenize(text)
            .iter()
            .take(max_len)
            .map(|t| self.id(t))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != PAD_ID)
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect();
        detokenize(&toks)
    }

    /// SHA-256 of the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update([b'\n']);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builds_with_reserved_ids_first() {
        let v = Vocabulary::build(&["a cat", "a dog"], 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(PAD_ID), Some("<pad>"));
        assert_eq!(v.token(UNK_ID), Some("<unk>"));
        assert_eq!(v.token(END_ID), Some("<end>"));
        // "a" is most frequent, then cat < dog lexicographically
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("cat"), 4);
        assert_eq!(v.id("dog"), 5);
        assert_eq!(v.id("bird"), UNK_ID);
    }

    #[test]
    fn min_frequency_filters_singletons() {
        let v = Vocabulary::build(&["a cat", "a dog"], 2).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.contains("a"));
        assert!(!v.contains("cat"));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: [&str; 0] = [];
        assert!(matches!(Vocabulary::build(&empty, 1), Err(Error::Data(m)) if m == "empty corpus"));
        assert!(Vocabulary::build(&["   "], 1).is_err());
    }

    #[test]
    fn encode_truncates_and_decode_inverts() {
        let v = Vocabulary::build(&["is the bus blue? yes"], 1).unwrap();
        let ids = v.encode("Is the  BUS blue? yes", 20);
        assert_eq!(v.decode(&ids), "is the bus blue? yes");
        assert_eq!(v.encode("is the bus blue? yes", 2).len(), 2);
    }

    #[test]
    fn serde_round_trip_preserves_hash() {
        let v = Vocabulary::build(&["a cat", "a dog", "the cat"], 1).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    proptest! {
        #[test]
        fn tokenize_round_trip(words in proptest::collection::vec("[A-Za-z?,.0-9]{1,6}", 1..8), seps in proptest::collection::vec("[ \t]{1,3}", 8)) {
            let mut s = String::new();
            for (i, w) in words.iter().enumerate() {
                s.push_str(w);
                s.push_str(&seps[i]);
            }
            let normalized = s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
            prop_assert_eq!(detokenize(&tokenize(&s)), normalized);
        }
    }
}
