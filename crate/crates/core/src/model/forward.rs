use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{KvCache, Model};
use crate::error::{Error, Result};
use crate::numerics::{layer_norm_row, matmul_row, softmax_in_place, Tensor};
use crate::tap::{ActivationSnapshot, PatchPlan, Site, SiteKey, SnapshotMeta, TapSpec};
use crate::tokenizer::TokenId;

/// Rows below which row-parallel loops stay on the calling thread.
const PAR_ROWS: usize = 4;

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[n_new × vocab]`.
    pub logits: Tensor,
    /// Final-layer-norm output, `[n_new × d_model]`.
    pub hidden: Tensor,
    pub captured: Option<ActivationSnapshot>,
}

pub(crate) struct Pass {
    pub hidden: Vec<f32>,
    pub captured: Option<ActivationSnapshot>,
}

struct Recorder<'a> {
    spec: &'a TapSpec,
    past: usize,
    entries: BTreeMap<SiteKey, Tensor>,
}

impl Recorder<'_> {
    fn record_rows(&mut self, site: Site, layer: usize, rows: &[f32], width: usize) {
        if !self.spec.wants(site, layer) {
            return;
        }
        for (i, row) in rows.chunks(width).enumerate() {
            let position = self.past + i;
            if self.spec.positions.contains(position) {
                let t = Tensor::vector(row.to_vec()).expect("non-empty row");
                self.entries.insert(
                    SiteKey {
                        site,
                        layer,
                        position,
                    },
                    t,
                );
            }
        }
    }
}

fn linear(x: &[f32], w: &Tensor, b: &Tensor) -> Vec<f32> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / k;
    let mut out = vec![0.0f32; rows * n];
    let kernel = |(i, o): (usize, &mut [f32])| {
        matmul_row(&x[i * k..(i + 1) * k], w.data(), n, o);
        for (v, bias) in o.iter_mut().zip(b.data()) {
            *v += bias;
        }
    };
    if rows >= PAR_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(kernel);
    }
    out
}

fn norm_rows(x: &[f32], gain: &Tensor, bias: &Tensor, eps: f32) -> Vec<f32> {
    let d = gain.numel();
    let mut out = vec![0.0f32; x.len()];
    for (src, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        layer_norm_row(src, gain.data(), bias.data(), eps, dst);
    }
    out
}

fn apply_patches(
    plan: Option<&PatchPlan>,
    site: Site,
    layer: usize,
    past: usize,
    rows: &mut [f32],
    d: usize,
) {
    if let Some(plan) = plan {
        for e in plan.lookup(site, layer) {
            let i = e.position - past;
            rows[i * d..(i + 1) * d].copy_from_slice(e.vector.data());
        }
    }
}

impl Model {
    /// Process `tokens` after whatever `cache` already holds.
    ///
    /// Taps record values after any patch at the same site. Patch positions
    /// must fall inside the positions processed by this call.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        cache: &mut KvCache,
        taps: Option<&TapSpec>,
        patches: Option<&PatchPlan>,
    ) -> Result<ForwardOutput> {
        let n = tokens.len();
        let pass = self.run(tokens, cache, taps, patches)?;
        let logits = self.project_logits(&pass.hidden, 0..n);
        Ok(ForwardOutput {
            logits: Tensor::new(vec![n, self.config.vocab_size], logits)?,
            hidden: Tensor::new(vec![n, self.config.d_model], pass.hidden)?,
            captured: pass.captured,
        })
    }

    /// Final hidden states (`[n × d_model]`) of a fresh pass, without the LM head.
    pub fn hidden_states(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let mut cache = self.new_cache();
        let pass = self.run(tokens, &mut cache, None, None)?;
        Tensor::new(vec![tokens.len(), self.config.d_model], pass.hidden)
    }

    pub(crate) fn project_logits(&self, hidden: &[f32], rows: std::ops::Range<usize>) -> Vec<f32> {
        let d = self.config.d_model;
        let vocab = self.config.vocab_size;
        let head = self.weights.lm_head().data();
        let mut out = vec![0.0f32; rows.len() * vocab];
        for (r, dst) in rows.zip(out.chunks_mut(vocab)) {
            let h = &hidden[r * d..(r + 1) * d];
            dst.par_chunks_mut(1024).enumerate().for_each(|(c, chunk)| {
                for (j, o) in chunk.iter_mut().enumerate() {
                    let v = c * 1024 + j;
                    *o = h
                        .iter()
                        .zip(&head[v * d..(v + 1) * d])
                        .map(|(a, b)| a * b)
                        .sum();
                }
            });
        }
        out
    }

    fn validate_call(
        &self,
        tokens: &[TokenId],
        cache: &KvCache,
        taps: Option<&TapSpec>,
        patches: Option<&PatchPlan>,
    ) -> Result<()> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::EmptyInput("forward tokens"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::TokenRange {
                id: bad,
                vocab_size: c.vocab_size,
            });
        }
        let past = cache.len();
        let total = past + tokens.len();
        if total > c.max_positions {
            return Err(Error::Range(format!(
                "{total} positions exceed max_positions {}",
                c.max_positions
            )));
        }
        if let Some(spec) = taps {
            spec.validate(c.n_layers, total)?;
        }
        if let Some(plan) = patches {
            if plan.model_hash() != self.hash {
                return Err(Error::Compatibility {
                    expected: plan.model_hash().to_owned(),
                    actual: self.hash.clone(),
                });
            }
            for e in plan.entries() {
                let layer_bound = if e.site == Site::EmbeddingOut {
                    1
                } else {
                    c.n_layers
                };
                if e.layer >= layer_bound {
                    return Err(Error::Patch(format!(
                        "{} layer {} out of range",
                        e.site, e.layer
                    )));
                }
                if !(past..total).contains(&e.position) {
                    return Err(Error::Patch(format!(
                        "patch position {} outside processed positions {past}..{total}",
                        e.position
                    )));
                }
                if e.vector.numel() != c.d_model {
                    return Err(Error::Dimension {
                        op: "patch",
                        left: vec![c.d_model],
                        right: e.vector.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    pub(crate) fn run(
        &self,
        tokens: &[TokenId],
        cache: &mut KvCache,
        taps: Option<&TapSpec>,
        patches: Option<&PatchPlan>,
    ) -> Result<Pass> {
        self.validate_call(tokens, cache, taps, patches)?;
        let c = &self.config;
        let w = &self.weights;
        let (d, n_heads, hd) = (c.d_model, c.n_heads, c.head_dim());
        let n = tokens.len();
        let past = cache.len();
        let total = past + n;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut rec = taps.map(|spec| Recorder {
            spec,
            past,
            entries: BTreeMap::new(),
        });

        let mut h = vec![0.0f32; n * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let te = &w.tok_emb.data()[tok as usize * d..(tok as usize + 1) * d];
            let pe = &w.pos_emb.data()[(past + i) * d..(past + i + 1) * d];
            for ((o, a), b) in h[i * d..(i + 1) * d].iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }
        apply_patches(patches, Site::EmbeddingOut, 0, past, &mut h, d);
        if let Some(r) = rec.as_mut() {
            r.record_rows(Site::EmbeddingOut, 0, &h, d);
        }

        for (layer, b) in w.blocks.iter().enumerate() {
            let x = norm_rows(&h, &b.ln1_w, &b.ln1_b, c.ln_eps);
            let qkv = linear(&x, &b.qkv_w, &b.qkv_b);
            for row in qkv.chunks(3 * d) {
                cache.push(layer, &row[d..2 * d], &row[2 * d..]);
            }
            let (keys, values) = cache.layer(layer);
            let want_probs = rec
                .as_ref()
                .is_some_and(|r| r.spec.wants(Site::AttnWeights, layer));

            let attend = |i: usize| -> (Vec<f32>, Option<Vec<f32>>) {
                let t = past + i;
                let q = &qkv[i * 3 * d..i * 3 * d + d];
                let mut out = vec![0.0f32; d];
                let mut probs = want_probs.then(|| vec![0.0f32; n_heads * total]);
                let mut scores = vec![0.0f32; t + 1];
                for head in 0..n_heads {
                    let cols = head * hd..(head + 1) * hd;
                    let qh = &q[cols.clone()];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kh = &keys[j * d + cols.start..j * d + cols.end];
                        *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * scale;
                    }
                    softmax_in_place(&mut scores);
                    let oh = &mut out[cols.clone()];
                    for (j, &p) in scores.iter().enumerate() {
                        let vh = &values[j * d + cols.start..j * d + cols.end];
                        for (o, v) in oh.iter_mut().zip(vh) {
                            *o += p * v;
                        }
                    }
                    if let Some(pr) = probs.as_mut() {
                        pr[head * total..head * total + t + 1].copy_from_slice(&scores);
                    }
                }
                (out, probs)
            };
            let per_pos: Vec<(Vec<f32>, Option<Vec<f32>>)> = if n >= PAR_ROWS {
                (0..n).into_par_iter().map(attend).collect()
            } else {
                (0..n).map(attend).collect()
            };

            let mut heads_out = Vec::with_capacity(n * d);
            for (i, (o, probs)) in per_pos.into_iter().enumerate() {
                heads_out.extend_from_slice(&o);
                if let (Some(r), Some(p)) = (rec.as_mut(), probs) {
                    let position = past + i;
                    if r.spec.positions.contains(position) {
                        let t = Tensor::new(vec![n_heads, total], p)?;
                        r.entries.insert(
                            SiteKey {
                                site: Site::AttnWeights,
                                layer,
                                position,
                            },
                            t,
                        );
                    }
                }
            }

            let mut attn_out = linear(&heads_out, &b.proj_w, &b.proj_b);
            apply_patches(patches, Site::AttnOut, layer, past, &mut attn_out, d);
            if let Some(r) = rec.as_mut() {
                r.record_rows(Site::AttnOut, layer, &attn_out, d);
            }
            h.iter_mut().zip(&attn_out).for_each(|(a, b)| *a += b);
            apply_patches(patches, Site::MidResidual, layer, past, &mut h, d);
            if let Some(r) = rec.as_mut() {
                r.record_rows(Site::MidResidual, layer, &h, d);
            }

            let x = norm_rows(&h, &b.ln2_w, &b.ln2_b, c.ln_eps);
            let mut up = linear(&x, &b.up_w, &b.up_b);
            up.iter_mut().for_each(|v| *v = c.activation.apply(*v));
            let down = linear(&up, &b.down_w, &b.down_b);
            h.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
            apply_patches(patches, Site::BlockOut, layer, past, &mut h, d);
            if let Some(r) = rec.as_mut() {
                r.record_rows(Site::BlockOut, layer, &h, d);
            }
        }
        cache.commit(n);

        let hidden = norm_rows(&h, &w.ln_f_w, &w.ln_f_b, c.ln_eps);
        let captured = rec
            .map(|r| {
                ActivationSnapshot::new(
                    r.entries,
                    SnapshotMeta {
                        model_hash: self.hash.clone(),
                        n_layers: c.n_layers,
                        d_model: d,
                        token_ids: tokens.to_vec(),
                        boundary_position: None,
                        params: BTreeMap::new(),
                    },
                )
            })
            .transpose()?;
        Ok(Pass { hidden, captured })
    }
}
