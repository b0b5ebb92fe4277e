use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
/// Separates a question from its answer.
pub const SEP: usize = 2;
/// Terminates an answer.
pub const EOA: usize = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<sep>", "<eoa>"];

/// Word-level vocabulary: specials at ids 0..4, then content words in sorted
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercased whitespace tokens of `text`.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Whitespace-normalized, lowercased form of `text`.
pub fn normalize_text(text: &str) -> String {
    words(text).collect::<Vec<_>>().join(" ")
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let content: BTreeSet<String> = corpus
            .iter()
            .flat_map(|s| words(s.as_ref()).collect::<Vec<_>>())
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let list = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(content)
            .collect();
        Self::from_words(list).expect("specials first and unique by construction")
    }

    /// Restores a vocabulary from its id-ordered word list.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Vocabulary { words, index })
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

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Maps text to ids. In strict mode an unknown word is an error, otherwise
    /// it becomes `<unk>`.
    pub fn encode_text(&self, text: &str, strict: bool) -> Result<Vec<usize>> {
        words(text)
            .map(|w| match self.id(&w) {
                Some(id) => Ok(id),
                None if strict => Err(Error::Encoding(format!("unknown word `{w}`"))),
                None => Ok(UNK),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dedups_and_puts_specials_first() {
        let v = Vocabulary::build(&["a b a"]);
        assert_eq!(v.len(), SPECIALS.len() + 2);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
    }

    #[test]
    fn lowercases_and_rejects_unknown_in_strict_mode() {
        let v = Vocabulary::build(&["Hello World"]);
        assert_eq!(v.encode_text("hello WORLD", true).unwrap(), vec![4, 5]);
        assert!(v.encode_text("hello there", true).is_err());
        assert_eq!(v.encode_text("hello there", false).unwrap(), vec![4, UNK]);
    }

    #[test]
    fn from_words_validates_layout() {
        assert!(Vocabulary::from_words(vec!["x".into()]).is_err());
        let v = Vocabulary::build(&["q r"]);
        assert_eq!(Vocabulary::from_words(v.words().to_vec()).unwrap(), v);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(words in proptest::collection::vec("[a-z]{1,6}", 1..12), pad in " {0,3}") {
            let sentence = words.join(&format!(" {pad}"));
            let v = Vocabulary::build(&[sentence.as_str()]);
            let ids = v.encode_text(&sentence, true).unwrap();
            prop_assert_eq!(v.decode(&ids), normalize_text(&sentence));
        }
    }
}
