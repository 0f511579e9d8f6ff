use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine and experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("archive format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("model load error: {0}")]
    Load(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("corrupt vocabulary: {0}")]
    CorruptVocab(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenRange { id: u32, vocab_size: usize },

    #[error("no \"\\n\\n\" boundary in text")]
    BoundaryNotFound,

    #[error("text contains {count} \"\\n\\n\" boundaries; expected exactly one")]
    AmbiguousBoundary { count: usize },

    #[error("boundary does not separate two non-empty paragraphs")]
    EmptySegment,

    #[error("out of range: {0}")]
    Range(String),

    #[error("patch error: {0}")]
    Patch(String),

    #[error("snapshot/model mismatch: snapshot captured from {expected}, model is {actual}")]
    Compatibility { expected: String, actual: String },

    #[error("snapshot is missing block_out layers {missing:?}")]
    IncompleteSnapshot { missing: Vec<usize> },

    #[error("snapshot spans donor positions {positions:?}; expected exactly one")]
    AmbiguousSnapshot { positions: Vec<usize> },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("missing embedding for record ids {0:?}")]
    MissingEmbedding(Vec<String>),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
