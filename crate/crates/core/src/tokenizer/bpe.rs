use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;

use super::{TokenId, TokenSequence, Tokenizer};
use crate::error::{Error, Result};

const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

pub const GPT2_EOT: &str = "<|endoftext|>";

/// The byte-level BPE remapping: printable bytes map to themselves, the rest
/// to code points from U+0100 upward in byte order.
pub fn byte_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut n = 0u32;
    for b in 0..=255u8 {
        let printable =
            (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
        table[b as usize] = if printable {
            b as char
        } else {
            n += 1;
            char::from_u32(255 + n).unwrap()
        };
    }
    table
}

/// Surface form ↔ id maps plus the byte remapping table.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    id_to_bytes: Vec<Vec<u8>>,
    byte_to_unicode: [char; 256],
}

impl Vocabulary {
    pub fn new(token_to_id: HashMap<String, TokenId>) -> Result<Self> {
        let byte_to_unicode = byte_to_unicode();
        let unicode_to_byte: HashMap<char, u8> = byte_to_unicode
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();

        let mut id_to_token = vec![None; token_to_id.len()];
        for (tok, &id) in &token_to_id {
            let slot = id_to_token.get_mut(id as usize).ok_or_else(|| {
                Error::CorruptVocab(format!(
                    "id {id} for {tok:?} is not dense in [0, {})",
                    token_to_id.len()
                ))
            })?;
            if slot.replace(tok.clone()).is_some() {
                return Err(Error::CorruptVocab(format!("id {id} assigned twice")));
            }
        }
        let id_to_token: Vec<String> = id_to_token
            .into_iter()
            .map(|t| t.expect("dense ids"))
            .collect();
        let id_to_bytes = id_to_token
            .iter()
            .map(|tok| {
                // Special tokens such as <|endoftext|> are plain ASCII and map through unchanged.
                tok.chars()
                    .map(|c| {
                        unicode_to_byte.get(&c).copied().ok_or_else(|| {
                            Error::CorruptVocab(format!("token {tok:?} has unmapped char {c:?}"))
                        })
                    })
                    .collect::<Result<Vec<u8>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token_to_id,
            id_to_token,
            id_to_bytes,
            byte_to_unicode,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let map: HashMap<String, TokenId> = serde_json::from_slice(&raw)
            .map_err(|e| Error::CorruptVocab(format!("{}: {e}", path.display())))?;
        Self::new(map)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn byte_to_unicode(&self) -> &[char; 256] {
        &self.byte_to_unicode
    }
}

/// Ordered pair merges; rank is the list index.
#[derive(Debug, Clone)]
pub struct MergeRules {
    ranks: HashMap<(String, String), usize>,
}

impl MergeRules {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(pairs.len());
        for (rank, pair) in pairs.into_iter().enumerate() {
            if let Some(prev) = ranks.insert(pair.clone(), rank) {
                return Err(Error::CorruptVocab(format!(
                    "merge {pair:?} listed at ranks {prev} and {rank}"
                )));
            }
        }
        Ok(Self { ranks })
    }

    /// Parse GPT-2 `merges.txt`: one `left right` per line, optional leading `#version` line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() || (lineno == 0 && line.starts_with("#version")) {
                continue;
            }
            let (l, r) = line
                .split_once(' ')
                .filter(|(l, r)| !l.is_empty() && !r.is_empty() && !r.contains(' '))
                .ok_or_else(|| {
                    Error::CorruptVocab(format!("merges line {}: {line:?}", lineno + 1))
                })?;
            pairs.push((l.to_owned(), r.to_owned()));
        }
        Self::new(pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    fn rank(&self, left: &str, right: &str) -> Option<usize> {
        // Borrowed-key lookup would need a custom key type; pairs are short.
        self.ranks
            .get(&(left.to_owned(), right.to_owned()))
            .copied()
    }
}

/// How text is split before merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreTokenizer {
    /// The GPT-2 contraction/letters/digits/whitespace pattern.
    Gpt2,
    /// No splitting; the whole text is one piece.
    Whole,
}

/// GPT-2-compatible byte-level BPE.
#[derive(Debug)]
pub struct BpeTokenizer {
    vocab: Vocabulary,
    merges: MergeRules,
    pre: PreTokenizer,
    pattern: Regex,
    bos: TokenId,
}

impl BpeTokenizer {
    pub fn new(
        vocab: Vocabulary,
        merges: MergeRules,
        pre: PreTokenizer,
        bos: TokenId,
    ) -> Result<Self> {
        if bos as usize >= vocab.len() {
            return Err(Error::TokenRange {
                id: bos,
                vocab_size: vocab.len(),
            });
        }
        Ok(Self {
            vocab,
            merges,
            pre,
            pattern: Regex::new(GPT2_PATTERN).expect("GPT-2 pattern compiles"),
            bos,
        })
    }

    /// Load GPT-2 `vocab.json` + `merges.txt`. BOS defaults to `<|endoftext|>` when present.
    pub fn from_files(
        vocab: impl AsRef<Path>,
        merges: impl AsRef<Path>,
        bos: Option<TokenId>,
    ) -> Result<Self> {
        let vocab = Vocabulary::load(vocab)?;
        let merges = MergeRules::load(merges)?;
        let bos = match bos {
            Some(b) => b,
            None => vocab.id(GPT2_EOT).ok_or_else(|| {
                Error::CorruptVocab(format!("no {GPT2_EOT} token; configure a BOS id"))
            })?,
        };
        Self::new(vocab, merges, PreTokenizer::Gpt2, bos)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn bpe_piece(&self, piece: &str, out: &mut Vec<TokenId>) -> Result<()> {
        let table = self.vocab.byte_to_unicode();
        let mut word: Vec<String> = piece
            .bytes()
            .map(|b| table[b as usize].to_string())
            .collect();
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| self.merges.rank(&w[0], &w[1]).map(|r| (r, &w[0], &w[1])))
                .min_by_key(|(r, _, _)| *r);
            let Some((_, first, second)) = best else {
                break;
            };
            let (first, second) = (first.clone(), second.clone());
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut word[i]));
                    i += 1;
                }
            }
            word = merged;
        }
        for sym in &word {
            out.push(self.vocab.id(sym).ok_or_else(|| {
                Error::CorruptVocab(format!("merged symbol {sym:?} is not in the vocabulary"))
            })?);
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn toy(merges: &[&str], pre: PreTokenizer) -> Self {
        let table = byte_to_unicode();
        let mut vocab: HashMap<String, TokenId> = table
            .iter()
            .enumerate()
            .map(|(i, c)| (c.to_string(), i as TokenId))
            .collect();
        let mut pairs = Vec::new();
        for m in merges {
            let (l, r) = m.split_once(' ').unwrap();
            let id = vocab.len() as TokenId;
            vocab.insert(format!("{l}{r}"), id);
            pairs.push((l.to_owned(), r.to_owned()));
        }
        let bos = vocab.len() as TokenId;
        vocab.insert(GPT2_EOT.into(), bos);
        Self::new(
            Vocabulary::new(vocab).unwrap(),
            MergeRules::new(pairs).unwrap(),
            pre,
            bos,
        )
        .unwrap()
    }
}

impl Tokenizer for BpeTokenizer {
    fn encode(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        match self.pre {
            PreTokenizer::Whole => {
                if !text.is_empty() {
                    self.bpe_piece(text, &mut ids)?;
                }
            }
            PreTokenizer::Gpt2 => {
                for m in self.pattern.find_iter(text) {
                    let m =
                        m.map_err(|e| Error::CorruptVocab(format!("pre-tokenizer failed: {e}")))?;
                    self.bpe_piece(m.as_str(), &mut ids)?;
                }
            }
        }
        Ok(TokenSequence {
            ids,
            source_text: text.to_owned(),
        })
    }

    fn token_bytes(&self, id: TokenId) -> Result<&[u8]> {
        self.vocab
            .id_to_bytes
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(Error::TokenRange {
                id,
                vocab_size: self.vocab.len(),
            })
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn bos_id(&self) -> TokenId {
        self.bos
    }
}
