use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id. Always below the vocabulary size of the [`Vocab`] that produced it.
pub type Token = u32;

/// Default printable alphabet; with the reserved separator this gives V = 32.
pub const DEFAULT_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz01234";

/// Character-level vocabulary: one id per alphabet character plus a reserved
/// separator id (`alphabet.len()`), used between serialized fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    alphabet: Vec<char>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new(DEFAULT_ALPHABET).expect("default alphabet is valid")
    }
}

impl Vocab {
    pub fn new(alphabet: &str) -> Result<Self> {
        let chars: Vec<char> = alphabet.chars().collect();
        if chars.is_empty() {
            return Err(Error::GenConfig("alphabet is empty".into()));
        }
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::GenConfig(format!("duplicate character {c:?} in alphabet")));
            }
        }
        Ok(Self { alphabet: chars })
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    /// Number of character tokens (excludes the separator).
    pub fn n_chars(&self) -> usize {
        self.alphabet.len()
    }

    /// Total vocabulary size V, separator included.
    pub fn size(&self) -> usize {
        self.alphabet.len() + 1
    }

    pub fn sep(&self) -> Token {
        self.alphabet.len() as Token
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<Token>> {
        text.chars()
            .enumerate()
            .map(|(position, ch)| {
                self.alphabet
                    .iter()
                    .position(|&c| c == ch)
                    .map(|id| id as Token)
                    .ok_or(Error::UnknownChar { ch, position })
            })
            .collect()
    }

    /// Inverse of [`Vocab::tokenize`]. The separator renders as `'|'`.
    pub fn detokenize(&self, tokens: &[Token]) -> Result<String> {
        tokens
            .iter()
            .map(|&id| {
                if (id as usize) < self.alphabet.len() {
                    Ok(self.alphabet[id as usize])
                } else if id == self.sep() {
                    Ok('|')
                } else {
                    Err(Error::TokenOutOfRange {
                        id,
                        vocab: self.size(),
                    })
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text() {
        assert!(Vocab::default().tokenize("").unwrap().is_empty());
    }

    #[test]
    fn direct_mapping() {
        let v = Vocab::new("ab").unwrap();
        assert_eq!(v.tokenize("aba").unwrap(), vec![0, 1, 0]);
        assert_eq!(v.size(), 3);
        assert_eq!(v.sep(), 2);
    }

    #[test]
    fn unknown_char_reports_position() {
        let v = Vocab::new("ab").unwrap();
        match v.tokenize("abxa") {
            Err(Error::UnknownChar { ch, position }) => {
                assert_eq!(ch, 'x');
                assert_eq!(position, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_alphabet_rejected() {
        assert!(Vocab::new("aba").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip(s in "[a-z0-4]{0,40}") {
            let v = Vocab::default();
            prop_assert_eq!(v.detokenize(&v.tokenize(&s).unwrap()).unwrap(), s);
        }
    }
}
