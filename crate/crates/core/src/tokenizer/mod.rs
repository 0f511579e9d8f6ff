//! Tokenizers and paragraph-boundary location.
//!
//! When `"\n\n"` is split over several tokens (GPT-2 does this whenever the
//! next paragraph starts with a non-space character: `"A\n\nB"` becomes
//! `A`, `\n`, `\n`, `B`), the boundary is the **last** token of the span. Under
//! causal attention that token's hidden states are the ones that condition
//! the next paragraph.

mod bpe;
mod bytes;

pub use bpe::{BpeTokenizer, MergeRules, PreTokenizer, Vocabulary};
pub use bytes::ByteTokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PARAGRAPH_BREAK: &str = "\n\n";

/// Token ids together with the text they were encoded from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub source_text: String,
}

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Result<TokenSequence>;

    /// Raw bytes of one token.
    fn token_bytes(&self, id: TokenId) -> Result<&[u8]>;

    fn vocab_size(&self) -> usize;

    /// Id prepended to prompts as `<bos>`.
    fn bos_id(&self) -> TokenId;

    fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.token_bytes(id)?);
        }
        Ok(out)
    }

    /// Decode to a string. Invalid UTF-8 (possible for sampled ids that split
    /// a multi-byte character) is replaced with U+FFFD.
    fn decode(&self, ids: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }
}

/// Byte offset of the `"\n\n"` separating exactly two non-empty paragraphs.
pub fn find_paragraph_break(text: &str) -> Result<usize> {
    let count = text.matches(PARAGRAPH_BREAK).count();
    match count {
        0 => Err(Error::BoundaryNotFound),
        1 => {
            let at = text.find(PARAGRAPH_BREAK).expect("counted one match");
            if at == 0 || at + PARAGRAPH_BREAK.len() == text.len() {
                return Err(Error::EmptySegment);
            }
            Ok(at)
        }
        count => Err(Error::AmbiguousBoundary { count }),
    }
}

/// Index of the token whose decoded span covers the final byte of the
/// paragraph break.
pub fn locate_boundary_token(tokenizer: &dyn Tokenizer, seq: &TokenSequence) -> Result<usize> {
    let last_byte = find_paragraph_break(&seq.source_text)? + PARAGRAPH_BREAK.len() - 1;
    let mut start = 0usize;
    for (i, &id) in seq.ids.iter().enumerate() {
        let end = start + tokenizer.token_bytes(id)?.len();
        if (start..end).contains(&last_byte) {
            return Ok(i);
        }
        start = end;
    }
    Err(Error::Range(format!(
        "token ids decode to {start} bytes, text has {} bytes",
        seq.source_text.len()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_tokenizer_boundary_is_second_newline() {
        let t = ByteTokenizer::new();
        let seq = t.encode("A\n\nB").unwrap();
        assert_eq!(locate_boundary_token(&t, &seq).unwrap(), 2);
    }

    #[test]
    fn single_token_break_is_its_own_index() {
        let t = BpeTokenizer::toy(&["Ċ Ċ"], PreTokenizer::Whole);
        let seq = t.encode("A\n\nB").unwrap();
        assert_eq!(seq.ids.len(), 3);
        assert_eq!(locate_boundary_token(&t, &seq).unwrap(), 1);
    }

    #[test]
    fn boundary_errors() {
        let t = ByteTokenizer::new();
        let locate = |s: &str| locate_boundary_token(&t, &t.encode(s).unwrap());
        assert!(matches!(locate("AB"), Err(Error::BoundaryNotFound)));
        assert!(matches!(
            locate("a\n\nb\n\nc"),
            Err(Error::AmbiguousBoundary { count: 2 })
        ));
        assert!(matches!(locate("\n\nb"), Err(Error::EmptySegment)));
        assert!(matches!(locate("a\n\n"), Err(Error::EmptySegment)));
    }
}
