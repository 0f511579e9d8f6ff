//! Seeded sampling.
//!
//! Randomness comes from [`CounterRng`]: SplitMix64 evaluated in counter mode,
//! `draw(seed, i) = mix(seed + (i + 1) · 0x9E3779B97F4A7C15)` with the standard
//! SplitMix64 finalizer. Draw `i` is exactly the `(i+1)`-th output of a
//! SplitMix64 stream seeded with `seed`, so any implementation can reproduce
//! a generation from `(seed, step)` alone. A uniform double is the top 53 bits
//! scaled by 2⁻⁵³.
//!
//! The next token is chosen by scaling logits by `1/temperature`, optionally
//! keeping the `top_k` largest (ties broken toward lower ids), and walking
//! the cumulative distribution in ascending id order until it exceeds
//! `u · total`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn draw(&self, index: u64) -> u64 {
        let mut z = self
            .seed
            .wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&self, index: u64) -> f64 {
        (self.draw(index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    /// `0` means greedy.
    pub temperature: f32,
    /// `0` disables top-k truncation.
    #[serde(default)]
    pub top_k: usize,
    #[serde(default)]
    pub seed: u64,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub stop_tokens: Vec<TokenId>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.3,
            top_k: 0,
            seed: 0,
            max_new_tokens: 100,
            stop_tokens: Vec::new(),
        }
    }
}

impl SamplingParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Param(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Pick the next token from one row of logits; `step` selects the PRNG draw.
pub fn sample_next(logits: &[f32], params: &SamplingParams, step: u64) -> TokenId {
    if params.temperature == 0.0 {
        return argmax(logits) as TokenId;
    }
    let inv_t = 1.0 / params.temperature as f64;
    let mut keep = vec![true; logits.len()];
    if params.top_k > 0 && params.top_k < logits.len() {
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        keep.iter_mut().for_each(|k| *k = false);
        for &i in &order[..params.top_k] {
            keep[i] = true;
        }
    }
    let max = logits
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&v, _)| v as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .zip(&keep)
        .map(|(&v, &k)| {
            if k {
                ((v as f64 - max) * inv_t).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let target = CounterRng::new(params.seed).uniform(step) * total;
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cum += w;
            last = i;
            if cum > target {
                return i as TokenId;
            }
        }
    }
    last as TokenId
}
