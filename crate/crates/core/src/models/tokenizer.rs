//! Byte-level tokenizer: ids `0..256` are raw bytes, followed by four specials.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const SEP: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

/// Token ids bounded by a context cap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTokens {
    ids: Vec<u32>,
    max_len: usize,
    truncated: bool,
}

impl TextTokens {
    /// Validated ids; exceeding `max_len` is an error here (see
    /// [`TextTokens::capped`] for truncate-and-flag).
    pub fn new(ids: Vec<u32>, max_len: usize) -> Result<Self> {
        if ids.len() > max_len {
            return Err(Error::invalid(format!("{} tokens exceed the context cap {max_len}", ids.len())));
        }
        check_ids(&ids)?;
        Ok(Self {
            ids,
            max_len,
            truncated: false,
        })
    }

    /// Keeps the first `max_len` ids and records whether anything was dropped.
    pub fn capped(mut ids: Vec<u32>, max_len: usize) -> Result<Self> {
        check_ids(&ids)?;
        let truncated = ids.len() > max_len;
        ids.truncate(max_len);
        Ok(Self {
            ids,
            max_len,
            truncated,
        })
    }

    pub fn from_text(text: &str, max_len: usize) -> Self {
        Self::capped(encode(text), max_len).expect("bytes are valid ids")
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn check_ids(ids: &[u32]) -> Result<()> {
    match ids.iter().find(|&&i| i as usize >= VOCAB_SIZE) {
        Some(bad) => Err(Error::invalid(format!("token id {bad} outside vocabulary of {VOCAB_SIZE}"))),
        None => Ok(()),
    }
}

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Bytes back to text; specials are dropped, invalid UTF-8 is replaced.
pub fn decode(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
