//! Byte-level tokenizer: ids `0..256` are raw bytes, followed by three
//! specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const SEP: u32 = 258;
/// Bytes plus BOS/EOS/SEP.
pub const VOCAB_SIZE: usize = 259;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Decodes byte tokens; specials are dropped.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|t| **t < 256).map(|t| *t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn is_stop(token: u32) -> bool {
    token == EOS || token == SEP
}
