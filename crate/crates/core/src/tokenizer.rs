//! Byte-level tokenizer.
//!
//! Every UTF-8 byte maps to its own id, shifted past the special tokens, so
//! any string (Devanagari included) encodes without out-of-vocabulary ids.
//! An encoded sequence is `[BOS] bytes.. [CLS]`; the model reads its
//! classification output at the CLS position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const CLS: u32 = 2;
pub const NUM_SPECIALS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteTokenizer {
    pub pad_id: u32,
    pub bos_id: u32,
    pub cls_id: u32,
    pub num_specials: u32,
    pub max_len: usize,
}

impl Default for ByteTokenizer {
    fn default() -> Self {
        Self::new(256).expect("default max_len is valid")
    }
}

impl ByteTokenizer {
    pub fn new(max_len: usize) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::Config(format!(
                "max_len {max_len} leaves no room for BOS and CLS"
            )));
        }
        Ok(Self {
            pad_id: PAD,
            bos_id: BOS,
            cls_id: CLS,
            num_specials: NUM_SPECIALS,
            max_len,
        })
    }

    pub fn vocab_size(&self) -> usize {
        256 + self.num_specials as usize
    }

    pub fn byte_id(&self, b: u8) -> u32 {
        u32::from(b) + self.num_specials
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < self.num_specials
    }

    /// Checks a deserialized tokenizer for internal consistency.
    pub fn validate(&self) -> Result<()> {
        let specials = [self.pad_id, self.bos_id, self.cls_id];
        if specials.iter().any(|&s| s >= self.num_specials)
            || specials[0] == specials[1]
            || specials[1] == specials[2]
            || specials[0] == specials[2]
        {
            return Err(Error::Config(format!(
                "special ids {specials:?} must be distinct and below {}",
                self.num_specials
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let budget = self.max_len - 2;
        let mut end = text.len().min(budget);
        // keep the truncated prefix decodable
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        let mut ids = Vec::with_capacity(end + 2);
        ids.push(self.bos_id);
        ids.extend(text.as_bytes()[..end].iter().map(|&b| self.byte_id(b)));
        ids.push(self.cls_id);
        ids
    }

    /// Encodes raw bytes, rejecting anything that is not UTF-8.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Result<Vec<u32>> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| Error::Encoding(format!("input is not UTF-8: {e}")))?;
        Ok(self.encode(text))
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let vocab = self.vocab_size() as u32;
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} >= vocab size {vocab}")));
            }
            if !self.is_special(id) {
                bytes.push((id - self.num_specials) as u8);
            }
        }
        String::from_utf8(bytes).map_err(|e| Error::Decoding(e.to_string()))
    }
}
