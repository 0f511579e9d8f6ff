use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelConfig};
use crate::archive::{content_hash, Archive};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-block parameters. Projection matrices are row-major `[in × out]`.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln1_w: Tensor,
    pub ln1_b: Tensor,
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln2_w: Tensor,
    pub ln2_b: Tensor,
    pub up_w: Tensor,
    pub up_b: Tensor,
    pub down_w: Tensor,
    pub down_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_f_w: Tensor,
    pub ln_f_b: Tensor,
    /// `[vocab × d_model]`; `None` means tied to `tok_emb`.
    pub lm_head: Option<Tensor>,
}

impl ModelWeights {
    pub fn lm_head(&self) -> &Tensor {
        self.lm_head.as_ref().unwrap_or(&self.tok_emb)
    }
}

const BLOCK_TENSORS: [&str; 12] = [
    "ln1.w",
    "ln1.b",
    "attn.qkv.w",
    "attn.qkv.b",
    "attn.proj.w",
    "attn.proj.b",
    "ln2.w",
    "ln2.b",
    "mlp.up.w",
    "mlp.up.b",
    "mlp.down.w",
    "mlp.down.b",
];

fn block_shapes(c: &ModelConfig) -> [Vec<usize>; 12] {
    let (d, f) = (c.d_model, c.d_ff);
    [
        vec![d],
        vec![d],
        vec![d, 3 * d],
        vec![3 * d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d],
        vec![d, f],
        vec![f],
        vec![f, d],
        vec![d],
    ]
}

/// Every required tensor name with its expected shape, in canonical order.
pub fn expected_tensors(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![
        ("tok_emb".to_string(), vec![c.vocab_size, c.d_model]),
        ("pos_emb".to_string(), vec![c.max_positions, c.d_model]),
    ];
    for i in 0..c.n_layers {
        for (name, shape) in BLOCK_TENSORS.iter().zip(block_shapes(c)) {
            out.push((format!("block{i}.{name}"), shape));
        }
    }
    out.push(("ln_f.w".into(), vec![c.d_model]));
    out.push(("ln_f.b".into(), vec![c.d_model]));
    out
}

impl Model {
    /// Load weights from a tensor archive. With `config = None` the config is
    /// read from the archive's `meta.config`.
    pub fn load(path: impl AsRef<Path>, config: Option<ModelConfig>) -> Result<Self> {
        let (archive, hash) = Archive::load_with_hash(path)?;
        Self::from_archive(archive, hash, config)
    }

    pub fn from_archive(
        mut archive: Archive,
        hash: String,
        config: Option<ModelConfig>,
    ) -> Result<Self> {
        let stored = archive
            .meta()
            .get("config")
            .map(|v| serde_json::from_value::<ModelConfig>(v.clone()))
            .transpose()
            .map_err(|e| Error::Load(format!("meta.config: {e}")))?;
        let config = match (config, stored) {
            (Some(given), Some(stored)) if given != stored => {
                return Err(Error::Load(format!(
                    "config {given:?} disagrees with archive config {stored:?}"
                )))
            }
            (Some(c), _) | (None, Some(c)) => c,
            (None, None) => {
                return Err(Error::Load(
                    "archive has no meta.config and no config was given".into(),
                ))
            }
        };
        config.validate()?;

        let has_head = archive.get("lm_head.w").is_some();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = archive
                .remove(name)
                .ok_or_else(|| Error::Load(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Load(format!(
                    "tensor {name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Load(format!(
                    "tensor {name} contains non-finite values"
                )));
            }
            Ok(t)
        };

        let expected = expected_tensors(&config);
        let mut it = expected.iter();
        let mut next = || {
            let (n, s) = it.next().expect("canonical list covers every field");
            take(n, s)
        };
        let tok_emb = next()?;
        let pos_emb = next()?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(BlockWeights {
                ln1_w: next()?,
                ln1_b: next()?,
                qkv_w: next()?,
                qkv_b: next()?,
                proj_w: next()?,
                proj_b: next()?,
                ln2_w: next()?,
                ln2_b: next()?,
                up_w: next()?,
                up_b: next()?,
                down_w: next()?,
                down_b: next()?,
            });
        }
        let ln_f_w = next()?;
        let ln_f_b = next()?;
        let lm_head = if has_head {
            Some(take("lm_head.w", &[config.vocab_size, config.d_model])?)
        } else {
            None
        };

        Ok(Model {
            config,
            weights: ModelWeights {
                tok_emb,
                pos_emb,
                blocks,
                ln_f_w,
                ln_f_b,
                lm_head,
            },
            hash,
        })
    }

    /// Random weights from a seed. Deterministic across platforms.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut archive = Archive::new();
        for (name, shape) in expected_tensors(&config) {
            let numel: usize = shape.iter().product();
            let data: Vec<f32> =
                if name.ends_with("ln1.w") || name.ends_with("ln2.w") || name == "ln_f.w" {
                    (0..numel).map(|_| 1.0 + rng.gen_range(-0.1..0.1)).collect()
                } else if name.ends_with(".b") {
                    (0..numel).map(|_| rng.gen_range(-0.02..0.02)).collect()
                } else {
                    // uniform with std ≈ 1/sqrt(fan_in) for matrices, fixed scale for embeddings
                    let scale = if shape.len() == 2 && !name.ends_with("_emb") {
                        (3.0 / shape[0] as f32).sqrt()
                    } else {
                        0.5
                    };
                    (0..numel).map(|_| rng.gen_range(-scale..scale)).collect()
                };
            archive.insert(name, Tensor::new(shape, data)?);
        }
        archive.set_meta("config", serde_json::to_value(&config)?);
        let hash = content_hash(&archive.to_bytes());
        Self::from_archive(archive, hash, None)
    }

    /// Serialize to an archive under the canonical tensor names.
    pub fn to_archive(&self) -> Result<Archive> {
        let w = &self.weights;
        let mut a = Archive::new();
        a.insert("tok_emb", w.tok_emb.clone());
        a.insert("pos_emb", w.pos_emb.clone());
        for (i, b) in w.blocks.iter().enumerate() {
            let ts = [
                &b.ln1_w, &b.ln1_b, &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.ln2_w, &b.ln2_b,
                &b.up_w, &b.up_b, &b.down_w, &b.down_b,
            ];
            for (name, t) in BLOCK_TENSORS.iter().zip(ts) {
                a.insert(format!("block{i}.{name}"), t.clone());
            }
        }
        a.insert("ln_f.w", w.ln_f_w.clone());
        a.insert("ln_f.b", w.ln_f_b.clone());
        if let Some(h) = &w.lm_head {
            a.insert("lm_head.w", h.clone());
        }
        a.set_meta("config", serde_json::to_value(&self.config)?);
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_is_deterministic() {
        let a = Model::seeded(ModelConfig::tiny(257), 7).unwrap();
        let b = Model::seeded(ModelConfig::tiny(257), 7).unwrap();
        let c = Model::seeded(ModelConfig::tiny(257), 8).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
        assert_eq!(a.weights().blocks.len(), 4);
    }

    #[test]
    fn missing_tensor_named() {
        let m = Model::seeded(ModelConfig::tiny(257), 1).unwrap();
        let mut a = m.to_archive().unwrap();
        a.remove("block3.ln1.w");
        let err = Model::from_archive(a, "x".into(), None).unwrap_err();
        assert!(err.to_string().contains("block3.ln1.w"), "{err}");
    }

    #[test]
    fn shape_mismatch_reports_both() {
        let m = Model::seeded(ModelConfig::tiny(257), 1).unwrap();
        let mut a = m.to_archive().unwrap();
        a.insert("block0.mlp.up.b", Tensor::zeros(&[3]).unwrap());
        let err = Model::from_archive(a, "x".into(), None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("[256]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tarc");
        let m = Model::seeded(ModelConfig::tiny(257), 3).unwrap();
        m.to_archive().unwrap().save(&path).unwrap();
        let loaded = Model::load(&path, None).unwrap();
        assert_eq!(loaded.config(), m.config());
        assert_eq!(
            loaded.weights().blocks[2].qkv_w,
            m.weights().blocks[2].qkv_w
        );
        assert!(loaded.weights().lm_head.is_none());
        assert_eq!(loaded.content_hash(), m.content_hash());
    }

    #[test]
    fn truncated_archive_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tarc");
        let bytes = Model::seeded(ModelConfig::tiny(257), 3)
            .unwrap()
            .to_archive()
            .unwrap()
            .to_bytes();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Model::load(&path, None), Err(Error::Format(_))));
    }
}
