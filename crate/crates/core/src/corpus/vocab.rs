use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const UNK: usize = 0;
pub const EOS: usize = 1;
pub const MASK: usize = 2;
/// Id of the answer placeholder inside query token sequences.
pub const SLOT: usize = 3;

pub const SLOT_TOKEN: &str = "[Y]";
const SPECIALS: [&str; 4] = ["<unk>", "<eos>", "<mask>", SLOT_TOKEN];

/// Whitespace-symbol vocabulary. Specials occupy ids 0..4, every other
/// symbol follows in sorted order, so two corpora over the same symbol set
/// always share ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_symbols<'a>(symbols: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = symbols
            .into_iter()
            .filter(|s| !SPECIALS.contains(s))
            .collect();
        let tokens: Vec<String> = SPECIALS
            .iter()
            .copied()
            .chain(set)
            .map(str::to_string)
            .collect();
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|s| self.id(s).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
