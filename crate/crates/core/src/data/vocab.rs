//! Tokenization and the thresholded vocabulary.
//!
//! Tokenizing lowercases the text, deletes every ASCII punctuation
//! character (`!"#$%&'()*+,-./:;<=>?@[\]^_`{|}~`) without splitting on it,
//! and splits on whitespace runs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::decoder::CaptionTokens;
use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

const RESERVED: [&str; 3] = [BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its index-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::invalid(
                "vocabulary must start with <bos>, <eos>, <unk>",
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
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

    /// Words of a caption, without BOS and EOS.
    pub fn decode(&self, caption: &CaptionTokens) -> Vec<String> {
        caption
            .words()
            .iter()
            .map(|&k| self.token(k).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Keeps words seen at least `min_count` times, most frequent first (ties
/// alphabetical), after the reserved BOS, EOS and UNK entries.
pub fn build_vocab<S: AsRef<str>>(captions: &[S], min_count: usize) -> Result<Vocabulary> {
    if captions.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for c in captions {
        for t in tokenize(c.as_ref()) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, n)| *n >= min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// `BOS`, the token ids (UNK for unknown words), `EOS`.
pub fn encode_caption<S: AsRef<str>>(vocab: &Vocabulary, tokens: &[S]) -> CaptionTokens {
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.push(BOS);
    ids.extend(tokens.iter().map(|t| vocab.id(t.as_ref()).unwrap_or(UNK)));
    ids.push(EOS);
    CaptionTokens { ids }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_cases() {
        assert_eq!(tokenize("She gets out."), vec!["she", "gets", "out"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A--B"), vec!["ab"]);
        assert_eq!(tokenize("  Don't   STOP!\tnow "), vec!["dont", "stop", "now"]);
    }

    #[test]
    fn threshold_is_inclusive() {
        let corpus = [
            "cat dog", "cat dog", "cat dog", "cat dog", "cat",
        ];
        let v = build_vocab(&corpus, 5).unwrap();
        assert!(v.id("cat").is_some());
        assert!(v.id("dog").is_none());
        let c = encode_caption(&v, &["dog"]);
        assert_eq!(c.ids, vec![BOS, UNK, EOS]);
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let v = build_vocab(&["a b c", "c d"], 1).unwrap();
        assert_eq!(v.len(), 3 + 4);
        for w in ["a", "b", "c", "d"] {
            assert!(v.id(w).is_some());
        }
        // most frequent first after the reserved entries
        assert_eq!(v.token(3), Some("c"));
    }

    #[test]
    fn empty_corpus_rejected() {
        let none: [&str; 0] = [];
        assert!(build_vocab(&none, 1).is_err());
    }

    #[test]
    fn encode_cases() {
        let v = build_vocab(&["she gets out"], 1).unwrap();
        let empty: [&str; 0] = [];
        assert_eq!(encode_caption(&v, &empty).ids, vec![BOS, EOS]);
        let ids = encode_caption(&v, &["she", "gets", "out"]).ids;
        assert_eq!(
            ids,
            vec![BOS, v.id("she").unwrap(), v.id("gets").unwrap(), v.id("out").unwrap(), EOS]
        );
    }

    #[test]
    fn reserved_layout_enforced() {
        assert!(Vocabulary::from_tokens(vec!["x".into()]).is_err());
        let dup = vec![BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, "a", "a"]
            .into_iter()
            .map(String::from)
            .collect();
        assert!(Vocabulary::from_tokens(dup).is_err());
    }

    proptest! {
        #[test]
        fn tokenize_idempotent(s in "[ -~\\t\\n]{0,40}") {
            let once = tokenize(&s);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }

        #[test]
        fn encode_decode_identity(words in proptest::collection::vec("[a-z]{1,5}", 0..8)) {
            let v = build_vocab(&[words.join(" ")], 1).unwrap();
            let cap = encode_caption(&v, &words);
            prop_assert_eq!(v.decode(&cap), words);
        }
    }
}
