//! CTC fine-tuning and decoding: loss, greedy and LM-fused beam decoding.

pub mod beam;
pub mod ctc;
pub mod finetune;
pub mod ngram;

use crate::errors::{Error, Result};

/// Index of the CTC blank symbol.
pub const BLANK: usize = 0;

/// Ordered symbol set with the blank reserved at index 0; real symbols are
/// the characters of the transcript alphabet, at ids `1..=len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Vocabulary {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for &c in &chars {
            if !seen.insert(c) {
                return Err(Error::InvalidConfig(format!("duplicate symbol {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(Error::InvalidConfig("vocabulary has no symbols".into()));
        }
        Ok(Vocabulary { chars })
    }

    /// Alphabet for corpora generated with `n_phones` phones.
    pub fn for_phones(n_phones: usize) -> Result<Self> {
        Vocabulary::new(
            (0..n_phones)
                .map(crate::audio::synth::phone_to_char)
                .collect(),
        )
    }

    /// Total class count including the blank.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn n_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        if id == BLANK {
            None
        } else {
            self.chars.get(id - 1).copied()
        }
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + 1)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id_of(c).ok_or_else(|| {
                    Error::InvalidConfig(format!("symbol {c:?} not in vocabulary"))
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&id| self.char_of(id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_basics() {
        let v = Vocabulary::for_phones(3).unwrap();
        assert_eq!(v.size(), 4);
        assert_eq!(v.char_of(BLANK), None);
        assert_eq!(v.char_of(1), Some('a'));
        assert_eq!(v.encode("cab").unwrap(), vec![3, 1, 2]);
        assert_eq!(v.decode(&[3, 0, 1, 2]), "cab");
        assert!(v.encode("z").is_err());
        assert!(Vocabulary::new(vec!['a', 'a']).is_err());
    }
}
