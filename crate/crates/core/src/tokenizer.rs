//! Byte-level tokenizer: each UTF-8 byte is its own token.

use crate::error::Result;
use crate::gpt::TokenBatch;

pub const BOS_ID: usize = 256;
pub const EOS_ID: usize = 257;
pub const PAD_ID: usize = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Inverse of [`tokenize`]. Special tokens are dropped; invalid UTF-8 is
/// replaced rather than rejected.
pub fn detokenize(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter_map(|&id| u8::try_from(id).ok()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Single-row batch holding the bytes of `text`.
pub fn tokenize_batch(text: &str) -> Result<TokenBatch> {
    let ids = tokenize(text);
    let n = ids.len();
    TokenBatch::new(ids, 1, n)
}
