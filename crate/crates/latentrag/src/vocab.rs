//! Word-level vocabulary with reserved structural and slot tokens.
//!
//! Text is split on whitespace; every piece must be a known token, so
//! `tokenize` and `detokenize` round-trip exactly on the closed synthetic
//! world.  Special tokens occupy a fixed prefix of the id space: structural
//! tags first, then the `m` thought slots and `n` subquery slots, then the
//! word list in sorted order.  Ids are therefore stable across save / load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const INFO_OPEN: &str = "<information>";
pub const INFO_CLOSE: &str = "</information>";
pub const ANSWER_OPEN: &str = "<Answer>";
pub const ANSWER_CLOSE: &str = "</Answer>";
/// Action token: continue retrieving.
pub const ACTION_QUERY: &str = "<query>";
/// Action token: produce the final answer.
pub const ACTION_ANSWER: &str = "<answer>";

const FIXED_SPECIALS: [&str; 8] =
    [PAD, EOS, INFO_OPEN, INFO_CLOSE, ANSWER_OPEN, ANSWER_CLOSE, ACTION_QUERY, ACTION_ANSWER];

/// Token table shared by the language model and the retrieval encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    m: usize,
    n: usize,
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    m: usize,
    n: usize,
    words: Vec<String>,
}

impl Vocabulary {
    /// Build from a word list plus `m` thought slots and `n` subquery slots.
    /// Words are deduplicated and sorted; they may not contain whitespace or
    /// collide with the reserved tokens.
    pub fn build<I, S>(m: usize, n: usize, words: I) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if m == 0 || n == 0 {
            return Err(Error::Parameter(format!(
                "need at least one thought and one subquery slot, got m={m} n={n}"
            )));
        }
        let mut tokens: Vec<String> = FIXED_SPECIALS.iter().map(|s| s.to_string()).collect();
        for i in 1..=m {
            tokens.push(format!("<think_{i}>"));
        }
        for j in 1..=n {
            tokens.push(format!("<query_{j}>"));
        }
        let reserved: BTreeMap<&str, ()> = tokens.iter().map(|t| (t.as_str(), ())).collect();
        let mut sorted: Vec<String> = Vec::new();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() {
                return Err(Error::Data("empty word in vocabulary".into()));
            }
            if w.chars().any(|c| c.is_whitespace()) {
                return Err(Error::Data(format!("word '{w}' contains whitespace")));
            }
            if reserved.contains_key(w) {
                return Err(Error::Data(format!("word '{w}' collides with a reserved token")));
            }
            sorted.push(w.to_string());
        }
        sorted.sort();
        sorted.dedup();
        tokens.extend(sorted);

        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i);
        }
        Ok(Vocabulary { m, n, tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Thought-slot count.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Subquery-slot count.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Index(format!("token id {id} out of vocabulary ({})", self.len())))
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn eos(&self) -> TokenId {
        1
    }

    pub fn info_open(&self) -> TokenId {
        2
    }

    pub fn info_close(&self) -> TokenId {
        3
    }

    pub fn answer_open(&self) -> TokenId {
        4
    }

    pub fn answer_close(&self) -> TokenId {
        5
    }

    pub fn action_query(&self) -> TokenId {
        6
    }

    pub fn action_answer(&self) -> TokenId {
        7
    }

    /// Id of `<think_i>` (1-based `i`, distinct embedding per slot index).
    pub fn think_slot(&self, i: usize) -> Result<TokenId> {
        if i == 0 || i > self.m {
            return Err(Error::Index(format!("thought slot {i} out of 1..={}", self.m)));
        }
        Ok(8 + (i - 1))
    }

    /// Id of `<query_j>` (1-based `j`).
    pub fn query_slot(&self, j: usize) -> Result<TokenId> {
        if j == 0 || j > self.n {
            return Err(Error::Index(format!("subquery slot {j} out of 1..={}", self.n)));
        }
        Ok(8 + self.m + (j - 1))
    }

    /// All thought-slot ids in order.
    pub fn think_slots(&self) -> Vec<TokenId> {
        (1..=self.m).map(|i| 8 + (i - 1)).collect()
    }

    /// All subquery-slot ids in order.
    pub fn query_slots(&self) -> Vec<TokenId> {
        (1..=self.n).map(|j| 8 + self.m + (j - 1)).collect()
    }

    /// Whitespace tokenization over the closed vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for piece in text.split_whitespace() {
            match self.index.get(piece) {
                Some(&id) => out.push(id),
                None => {
                    return Err(Error::Data(format!("unknown token '{piece}'")));
                }
            }
        }
        Ok(out)
    }

    /// Join tokens with single spaces.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            parts.push(self.token(id)?);
        }
        Ok(parts.join(" "))
    }

    // ── persistence ────────────────────────────────────────────────────────

    pub fn to_json(&self) -> String {
        let words = self.tokens[8 + self.m + self.n..].to_vec();
        let file = VocabFile { m: self.m, n: self.n, words };
        serde_json::to_string(&file).expect("vocabulary serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Vocabulary> {
        let file: VocabFile =
            serde_json::from_str(json).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
        Vocabulary::build(file.m, file.n, file.words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)?;
        Vocabulary::from_json(&text)
    }
}
