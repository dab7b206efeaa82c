//! Fixed 40-symbol vocabulary. Most symbols are single characters; the
//! template words are whole symbols carrying their trailing space, so the
//! stop marker decodes to exactly `"The final answer is: "`.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
/// Closes the answer span (the toy analogue of the closing brace of a boxed answer).
pub const EOS_ANSWER: usize = 2;
/// Opens the answer span; prefilled after the chain of thought.
pub const ANS_OPEN: usize = 3;
pub const USER: usize = 34;
pub const ASSISTANT: usize = 35;

const SYMBOLS: [&str; 40] = [
    "<pad>", "<bos>", "}", "{", // specials
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", // digits
    "+", "-", "*", "%", "=", ">", ",", ";", "?", " ", "(", ")", ".", ":", "|", // punctuation
    "y", "e", "s", "n", "o", // letters
    "User: ", "Assistant: ", "The ", "final ", "answer ", "is: ", // template words
];

/// Token ids of `"The final answer is: "`.
pub const STOP_MARKER: [usize; 4] = [36, 37, 38, 39];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Vocab;

impl Vocab {
    pub fn size(&self) -> usize {
        SYMBOLS.len()
    }

    pub fn symbol(&self, id: usize) -> Option<&'static str> {
        SYMBOLS.get(id).copied()
    }

    pub fn digit(&self, d: u8) -> usize {
        4 + d as usize
    }

    pub fn digit_value(&self, id: usize) -> Option<u8> {
        (4..14).contains(&id).then(|| (id - 4) as u8)
    }

    pub fn stop_marker(&self) -> &'static [usize] {
        &STOP_MARKER
    }

    /// Greedy longest-match encoding.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let best = SYMBOLS
                .iter()
                .enumerate()
                .filter(|(_, s)| rest.starts_with(*s))
                .max_by_key(|(_, s)| s.len());
            match best {
                Some((id, s)) => {
                    ids.push(id);
                    rest = &rest[s.len()..];
                }
                None => {
                    let bad: String = rest.chars().take(1).collect();
                    return Err(Error::Unencodable(bad));
                }
            }
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.symbol(id).ok_or(Error::TokenOutOfRange {
                    id,
                    vocab: SYMBOLS.len(),
                })
            })
            .collect()
    }

    /// Lossy decode for logs: unknown ids render as `?`.
    pub fn decode_lossy(&self, ids: &[usize]) -> String {
        ids.iter().map(|&id| self.symbol(id).unwrap_or("?")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn size_and_marker() {
        let v = Vocab;
        assert_eq!(v.size(), 40);
        assert_eq!(v.decode(v.stop_marker()).unwrap(), "The final answer is: ");
        assert_eq!(v.encode("The final answer is: ").unwrap(), STOP_MARKER);
    }

    #[test]
    fn symbols_are_distinct() {
        let mut s = SYMBOLS.to_vec();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), SYMBOLS.len());
    }

    #[test]
    fn unencodable_symbol() {
        assert!(matches!(Vocab.encode("12x"), Err(Error::Unencodable(s)) if s == "x"));
    }

    proptest! {
        #[test]
        fn decode_then_encode_is_identity(ids in proptest::collection::vec(0usize..40, 0..30)) {
            let text = Vocab.decode(&ids).unwrap();
            prop_assert_eq!(Vocab.encode(&text).unwrap(), ids);
        }

        #[test]
        fn encode_then_decode_is_identity(idx in proptest::collection::vec(0usize..40, 0..30)) {
            let text: String = idx.iter().map(|&i| SYMBOLS[i]).collect();
            let ids = Vocab.encode(&text).unwrap();
            prop_assert_eq!(Vocab.decode(&ids).unwrap(), text);
        }
    }
}
