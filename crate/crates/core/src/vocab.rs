//! Closed word-level vocabularies.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::trajectory::{Role, TokenRecord, Trajectory};

pub const HINDSIGHT_OPEN: &str = "<hindsight>";
pub const HINDSIGHT_CLOSE: &str = "</hindsight>";

/// Turn index carried by hindsight frame tokens; never a real turn.
pub const FRAME_TURN: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u16);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A token as seen by a scorer: id, role and turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextToken {
    pub id: TokenId,
    pub role: Role,
    pub turn: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary; the hindsight frame tags are always appended.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self {
            words: Vec::new(),
            index: BTreeMap::new(),
        };
        for w in words.into_iter().chain([HINDSIGHT_OPEN, HINDSIGHT_CLOSE]) {
            if !v.index.contains_key(w) {
                let id = TokenId(v.words.len() as u16);
                v.words.push(w.to_string());
                v.index.insert(w.to_string(), id);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    /// Id of a word known to be present.
    pub fn id(&self, word: &str) -> TokenId {
        match self.get(word) {
            Some(id) => id,
            None => panic!("`{word}` missing from vocabulary"),
        }
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id.index()]
    }

    pub fn lookup(&self, word: &str) -> Result<TokenId> {
        self.get(word).ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn hindsight_open(&self) -> TokenId {
        self.id(HINDSIGHT_OPEN)
    }

    pub fn hindsight_close(&self) -> TokenId {
        self.id(HINDSIGHT_CLOSE)
    }

    pub fn encode_record(&self, tok: &TokenRecord) -> Result<ContextToken> {
        Ok(ContextToken {
            id: self.lookup(&tok.text)?,
            role: tok.role,
            turn: tok.turn_index,
        })
    }

    pub fn encode(&self, traj: &Trajectory) -> Result<Vec<ContextToken>> {
        traj.tokens.iter().map(|t| self.encode_record(t)).collect()
    }
}
