//! Text embedding backends.

use std::path::Path;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{l2_normalize, mean_pool, Tensor};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Tensor,
    pub backend: String,
    pub normalized: bool,
}

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;

    fn embed(&self, record_id: &str, text: &str) -> Result<EmbeddingVector>;
}

/// Mean of the model's final (post `ln_f`) hidden states over the text's
/// tokens, L2-normalized. Texts longer than the context window keep their
/// first `max_positions` tokens.
pub struct InternalEmbedder<'a> {
    model: &'a Model,
    tokenizer: &'a dyn Tokenizer,
}

impl<'a> InternalEmbedder<'a> {
    pub fn new(model: &'a Model, tokenizer: &'a dyn Tokenizer) -> Self {
        Self { model, tokenizer }
    }
}

impl Embedder for InternalEmbedder<'_> {
    fn name(&self) -> &str {
        "internal-mean-pool"
    }

    fn embed(&self, _record_id: &str, text: &str) -> Result<EmbeddingVector> {
        let mut ids = self.tokenizer.encode(text)?.ids;
        if ids.is_empty() {
            return Err(Error::EmptyInput("text to embed"));
        }
        ids.truncate(self.model.config().max_positions);
        let pooled = mean_pool(&self.model.hidden_states(&ids)?)?;
        let mut values = pooled.into_data();
        l2_normalize(&mut values)?;
        Ok(EmbeddingVector {
            values: Tensor::vector(values)?,
            backend: self.name().to_string(),
            normalized: true,
        })
    }
}

/// Precomputed vectors keyed by record id. The archive's `meta` must carry
/// `"embedder"` (string) and `"dim"` (integer); every tensor must be `[dim]`.
#[derive(Debug, Clone)]
pub struct ExternalEmbeddings {
    archive: Archive,
    embedder: String,
    dim: usize,
}

impl ExternalEmbeddings {
    pub fn from_archive(archive: Archive) -> Result<Self> {
        let embedder = archive
            .meta()
            .get("embedder")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Format("embedding archive meta lacks \"embedder\"".into()))?
            .to_string();
        let dim = archive
            .meta()
            .get("dim")
            .and_then(|v| v.as_u64())
            .filter(|&d| d > 0)
            .ok_or_else(|| {
                Error::Format("embedding archive meta lacks a positive \"dim\"".into())
            })? as usize;
        if let Some((name, t)) = archive.tensors().iter().find(|(_, t)| t.shape() != [dim]) {
            return Err(Error::Format(format!(
                "embedding {name} has shape {:?}, meta declares [{dim}]",
                t.shape()
            )));
        }
        Ok(Self {
            archive,
            embedder,
            dim,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedder(&self) -> &str {
        &self.embedder
    }

    pub fn missing_ids<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        ids.into_iter()
            .filter(|id| self.archive.get(id).is_none())
            .map(str::to_string)
            .collect()
    }
}

impl Embedder for ExternalEmbeddings {
    fn name(&self) -> &str {
        &self.embedder
    }

    fn embed(&self, record_id: &str, _text: &str) -> Result<EmbeddingVector> {
        let values = self
            .archive
            .get(record_id)
            .ok_or_else(|| Error::MissingEmbedding(vec![record_id.to_string()]))?
            .clone();
        Ok(EmbeddingVector {
            values,
            backend: self.embedder.clone(),
            normalized: false,
        })
    }
}
