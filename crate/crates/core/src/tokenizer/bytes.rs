use super::{TokenId, TokenSequence, Tokenizer};
use crate::error::{Error, Result};

/// One token per byte (`id == byte value`), plus a BOS token with id 256
/// that decodes to nothing.
#[derive(Debug, Clone, Default)]
pub struct ByteTokenizer {
    table: Vec<[u8; 1]>,
}

pub const BYTE_BOS: TokenId = 256;

impl ByteTokenizer {
    pub fn new() -> Self {
        Self {
            table: (0..=255u8).map(|b| [b]).collect(),
        }
    }
}

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Result<TokenSequence> {
        Ok(TokenSequence {
            ids: text.bytes().map(TokenId::from).collect(),
            source_text: text.to_owned(),
        })
    }

    fn token_bytes(&self, id: TokenId) -> Result<&[u8]> {
        match id {
            0..=255 => Ok(&self.table[id as usize]),
            BYTE_BOS => Ok(&[]),
            _ => Err(Error::TokenRange {
                id,
                vocab_size: self.vocab_size(),
            }),
        }
    }

    fn vocab_size(&self) -> usize {
        257
    }

    fn bos_id(&self) -> TokenId {
        BYTE_BOS
    }
}
