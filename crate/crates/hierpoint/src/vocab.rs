//! Character-level vocabulary shared by the chargrid embedding, the spotter's
//! recognition head, and the semantic encoder tokenizer.

use std::collections::HashMap;

use crate::{Error, Result};

/// Reserved token: background / padding / end-of-text in recognition.
pub const PAD: usize = 0;
/// Reserved token: masked-out position in masked language modeling.
pub const MASK: usize = 1;
/// Reserved token: kept for sequence-level tasks; currently unused.
pub const CLS: usize = 2;

const SPECIALS: usize = 3;

/// Character-to-id table. Ids `0..3` are the special tokens, glyph ids follow
/// in charset order.
#[derive(Debug, Clone)]
pub struct Vocab {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        // lowercase letters, digits, and colon: the glyph set the synthetic
        // renderer can draw.
        let charset: Vec<char> = ('a'..='z').chain('0'..='9').chain([':']).collect();
        Vocab::new(&charset)
    }
}

impl Vocab {
    pub fn new(charset: &[char]) -> Self {
        let ids = charset
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + SPECIALS))
            .collect();
        Vocab {
            chars: charset.to_vec(),
            ids,
        }
    }

    /// Total vocabulary size including specials.
    pub fn size(&self) -> usize {
        self.chars.len() + SPECIALS
    }

    pub fn id_of(&self, c: char) -> Result<usize> {
        self.ids
            .get(&c)
            .copied()
            .ok_or(Error::UnknownChar(c, c as u32))
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        if id < SPECIALS {
            None
        } else {
            self.chars.get(id - SPECIALS).copied()
        }
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS
    }

    /// Ids of ordinary glyph tokens (used for random MLM replacements).
    pub fn glyph_ids(&self) -> std::ops::Range<usize> {
        SPECIALS..self.size()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars().map(|c| self.id_of(c)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.char_of(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_specials() {
        let v = Vocab::default();
        assert_eq!(v.size(), 26 + 10 + 1 + 3);
        let ids = v.encode("a0:").unwrap();
        assert_eq!(v.decode(&ids), "a0:");
        assert!(v.is_special(PAD) && v.is_special(MASK) && v.is_special(CLS));
        assert!(v.char_of(PAD).is_none());
    }

    #[test]
    fn unknown_char_error_names_the_codepoint() {
        let v = Vocab::default();
        let err = v.id_of('Z').unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('Z') && msg.contains("005A"), "{msg}");
    }
}
