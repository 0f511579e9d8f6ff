//! Instrumented GPT-2-class inference with activation capture and patching,
//! plus the experiment harness for paragraph-boundary transfer studies.
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: f32 tensor and deterministic kernels
//! - [`archive`]: the `TARC0001` tensor container
//! - [`tokenizer`]: byte-level BPE (GPT-2 files) and boundary location
//! - [`model`]: forward pass, KV cache, seeded sampling
//! - [`tap`]: taps, snapshots, patch plans
//! - [`analysis`]: attention heatmaps and attention-output cosine structure
//! - [`transfer`]: original / transferred / neutral generation corpora
//! - [`eval`]: embeddings, distances, summaries, Welch t-test, PCA

pub mod analysis;
pub mod archive;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod tap;
pub mod tokenizer;
pub mod transfer;

pub use error::{Error, Result};
