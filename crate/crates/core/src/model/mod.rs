//! GPT-2-architecture decoder: pre-LN blocks, learned positions, GELU MLP,
//! optional tied LM head.

mod cache;
mod forward;
mod generate;
mod sampling;
mod weights;

pub use cache::KvCache;
pub use forward::ForwardOutput;
pub use generate::Generation;
pub use sampling::{sample_next, CounterRng, SamplingParams};
pub use weights::{BlockWeights, ModelWeights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Activation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f32,
    #[serde(default)]
    pub activation: Activation,
}

fn default_ln_eps() -> f32 {
    1e-5
}

impl ModelConfig {
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            vocab_size: 50257,
            max_positions: 1024,
            ln_eps: 1e-5,
            activation: Activation::GeluTanh,
        }
    }

    /// The L=4, H=4, d_model=64 model used by the property suites.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size,
            max_positions: 256,
            ln_eps: 1e-5,
            activation: Activation::GeluTanh,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Config(format!(
                "ln_eps must be > 0, got {}",
                self.ln_eps
            )));
        }
        Ok(())
    }
}

/// Loaded weights plus the content hash that identifies them in snapshots.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
    hash: String,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    /// SHA-256 of the archive the weights came from.
    pub fn content_hash(&self) -> &str {
        &self.hash
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(&self.config)
    }
}
