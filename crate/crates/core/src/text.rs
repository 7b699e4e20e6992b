//! Caption tokenization and vocabulary.
//!
//! Tokens are lowercased, split on Unicode whitespace and stripped of
//! leading/trailing non-alphanumeric characters. Id 0 is the OOV token and
//! id 1 the `[CLS]` slot; words follow in lexicographic order.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const OOV_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const OOV_TOKEN: &str = "[OOV]";
pub const CLS_TOKEN: &str = "[CLS]";

pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = captions.into_iter().flat_map(tokenize).collect();
        let mut tokens = vec![OOV_TOKEN.to_string(), CLS_TOKEN.to_string()];
        tokens.extend(words);
        Vocabulary::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Encodes a caption; never returns an empty list (falls back to a single OOV).
    pub fn encode(&self, caption: &str) -> Vec<u32> {
        let ids: Vec<u32> = tokenize(caption).iter().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            vec![OOV_ID]
        } else {
            ids
        }
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_punctuation_and_case() {
        assert_eq!(
            tokenize("  Add a DOG, please!  (now)"),
            vec!["add", "a", "dog", "please", "now"]
        );
        assert_eq!(tokenize("dog's bowl"), vec!["dog's", "bowl"]);
        assert!(tokenize(" ... ").is_empty());
    }

    #[test]
    fn vocabulary_reserves_oov_and_cls() {
        let v = Vocabulary::build(["b a", "c"]);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("zebra"), OOV_ID);
        assert_eq!(v.encode("!!!"), vec![OOV_ID]);
        assert_eq!(v.encode("A c"), vec![2, 4]);
    }
}
