//! Token-ID space shared by the pipeline and the attention providers.

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Maps text to token IDs and back.
///
/// Implementations owned by external providers may perform I/O, hence the
/// fallible signatures.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>>;
    fn decode(&self, tokens: &[TokenId]) -> Result<String>;
    fn vocab_size(&self) -> usize;
}

/// Lossless UTF-8 byte tokenizer: one token per byte, vocabulary of 256.
///
/// Encoding is context-free, so tokenizing sentences one at a time and
/// concatenating the IDs equals tokenizing the whole document.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const VOCAB_SIZE: usize = 256;
}

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        Ok(text.bytes().map(TokenId::from).collect())
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String> {
        let bytes = tokens
            .iter()
            .map(|&t| u8::try_from(t).map_err(|_| Error::Input(format!("token {t} outside byte vocabulary"))))
            .collect::<Result<Vec<u8>>>()?;
        // Generated byte sequences may split a multi-byte character.
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }
}
