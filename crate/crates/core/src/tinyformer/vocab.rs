use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::MASK_TOKEN;
use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;

/// Dense token ids. Ids 0..3 are the reserved padding, unknown and mask tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Keeps the `max_size` most frequent tokens (ties broken lexicographically)
    /// after the reserved ones.
    pub fn build<'a>(sequences: impl IntoIterator<Item = &'a [String]>, max_size: usize) -> Vocab {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for seq in sequences {
            for t in seq {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| ![PAD_TOKEN, UNK_TOKEN, MASK_TOKEN].contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = [PAD_TOKEN, UNK_TOKEN, MASK_TOKEN]
            .into_iter()
            .chain(ranked.into_iter().take(max_size).map(|(t, _)| t))
            .map(str::to_string)
            .collect();
        Vocab::from_tokens(tokens).expect("reserved tokens placed first")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < 3 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN || tokens[2] != MASK_TOKEN {
            return Err(Error::Checkpoint("vocab must start with the reserved tokens".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
