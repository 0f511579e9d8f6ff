//! Observational study of paragraph structure in attention.
//!
//! Two measurements over contexts that contain one paragraph break:
//!
//! 1. **Boundary heatmap.** For each context and layer the attention
//!    probabilities are summed over heads, the per-layer matrices are
//!    averaged, and the `[b−W, b+W]` window around the boundary token `b` is
//!    cropped out. Windows are then averaged elementwise over contexts.
//! 2. **Attention-output cosine structure.** Per layer, the pairwise cosine
//!    similarity of attention outputs over the `[b−S, b+S]` span, averaged
//!    over contexts. Pairs inside one paragraph versus pairs straddling the
//!    boundary give the within/across curves; the boundary token itself is
//!    in neither group.
//!
//! Contexts too short for the window are skipped with a warning.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{cosine_slices, Tensor};
use crate::tap::{capture, ActivationSnapshot, Selection, Site, TapSpec};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    First,
    Boundary,
    Second,
}

/// Token ids with the boundary position splitting them into two paragraphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedContext {
    pub id: String,
    tokens: Vec<TokenId>,
    boundary: usize,
}

impl SegmentedContext {
    pub fn new(id: impl Into<String>, tokens: Vec<TokenId>, boundary: usize) -> Result<Self> {
        if boundary == 0 || boundary + 1 >= tokens.len() {
            return Err(Error::Range(format!(
                "boundary {boundary} must lie strictly inside a sequence of {} tokens",
                tokens.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            tokens,
            boundary,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn segment(&self, position: usize) -> Segment {
        match position.cmp(&self.boundary) {
            std::cmp::Ordering::Less => Segment::First,
            std::cmp::Ordering::Equal => Segment::Boundary,
            std::cmp::Ordering::Greater => Segment::Second,
        }
    }

    fn fits(&self, half: usize) -> bool {
        self.boundary >= half && self.tokens.len() > self.boundary + half
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapResult {
    pub window: usize,
    /// `[(2W+1) × (2W+1)]`, rows are query offsets, columns key offsets.
    pub matrix: Tensor,
    /// Head-summed windows per layer (not averaged over layers).
    pub per_layer: Vec<Tensor>,
    pub contexts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineMatrixResult {
    pub span: usize,
    pub layers: Vec<usize>,
    /// One `[(2S+1) × (2S+1)]` matrix per entry of `layers`.
    pub matrices: Vec<Tensor>,
    pub contexts: usize,
    /// Position pairs dropped because an attention output had zero norm.
    pub excluded_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerTrend {
    pub layer: usize,
    pub within_mean: f64,
    pub across_mean: f64,
    pub gap: f64,
}

fn keep_fitting<'a>(
    contexts: &'a [SegmentedContext],
    half: usize,
    what: &str,
) -> Result<Vec<&'a SegmentedContext>> {
    let kept: Vec<_> = contexts
        .iter()
        .filter(|c| {
            let ok = c.fits(half);
            if !ok {
                warn!(context = %c.id, boundary = c.boundary, len = c.tokens.len(), half, "context too short for {what}; skipped");
            }
            ok
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::Analysis(format!(
            "every context was too short for a {what} of ±{half}"
        )));
    }
    Ok(kept)
}

/// Head-summed, layer-resolved attention window for one context's snapshot.
/// Returns `n_layers` flattened `[(2W+1)²]` windows.
fn context_windows(
    snap: &ActivationSnapshot,
    boundary: usize,
    window: usize,
    n_layers: usize,
) -> Result<Vec<Vec<f64>>> {
    let side = 2 * window + 1;
    let lo = boundary - window;
    let mut out = vec![vec![0.0f64; side * side]; n_layers];
    for (layer, win) in out.iter_mut().enumerate() {
        for qi in 0..side {
            let probs = snap.get(Site::AttnWeights, layer, lo + qi).ok_or_else(|| {
                Error::Analysis(format!(
                    "snapshot lacks attention weights for layer {layer} position {}",
                    lo + qi
                ))
            })?;
            let (heads, _) = probs.dims2()?;
            for ki in 0..side {
                win[qi * side + ki] = (0..heads).map(|h| probs.row(h)[lo + ki] as f64).sum();
            }
        }
    }
    Ok(out)
}

/// Heatmap from pre-captured attention snapshots, one per context.
pub fn heatmap_from_snapshots(
    items: &[(&ActivationSnapshot, usize)],
    window: usize,
) -> Result<HeatmapResult> {
    let n_layers = items
        .first()
        .map(|(s, _)| s.meta().n_layers)
        .ok_or(Error::EmptyInput("heatmap contexts"))?;
    let side = 2 * window + 1;
    let per_context: Vec<Vec<Vec<f64>>> = items
        .par_iter()
        .map(|(snap, b)| context_windows(snap, *b, window, n_layers))
        .collect::<Result<_>>()?;

    let mut layer_sums = vec![vec![0.0f64; side * side]; n_layers];
    for ctx in &per_context {
        for (acc, win) in layer_sums.iter_mut().zip(ctx) {
            acc.iter_mut().zip(win).for_each(|(a, v)| *a += v);
        }
    }
    let n_ctx = per_context.len() as f64;
    let per_layer = layer_sums
        .iter()
        .map(|s| {
            Tensor::new(
                vec![side, side],
                s.iter().map(|v| (v / n_ctx) as f32).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut combined = vec![0.0f64; side * side];
    for s in &layer_sums {
        combined.iter_mut().zip(s).for_each(|(a, v)| *a += v);
    }
    let denom = n_ctx * n_layers as f64;
    let matrix = Tensor::new(
        vec![side, side],
        combined.iter().map(|v| (v / denom) as f32).collect(),
    )?;
    Ok(HeatmapResult {
        window,
        matrix,
        per_layer,
        contexts: per_context.len(),
    })
}

/// Average attention around the boundary (head sum, then layer mean, then context mean).
pub fn attention_boundary_heatmap(
    contexts: &[SegmentedContext],
    model: &Model,
    window: usize,
) -> Result<HeatmapResult> {
    let kept = keep_fitting(contexts, window, "heatmap window")?;
    let snaps: Vec<(ActivationSnapshot, usize)> = kept
        .par_iter()
        .map(|c| {
            let spec = TapSpec::new(
                vec![Site::AttnWeights],
                Selection::all(),
                Selection::only(c.boundary - window..=c.boundary + window),
            )?;
            Ok((capture(model, &c.tokens, &spec)?, c.boundary))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<(&ActivationSnapshot, usize)> = snaps.iter().map(|(s, b)| (s, *b)).collect();
    heatmap_from_snapshots(&refs, window)
}

struct CosineAccum {
    sums: Vec<f64>,
    counts: Vec<u32>,
}

fn pairwise_cosine(vectors: &[&[f32]], acc: &mut CosineAccum) -> usize {
    let n = vectors.len();
    let mut excluded = 0;
    for i in 0..n {
        for j in i + 1..n {
            match cosine_slices(vectors[i], vectors[j]) {
                Ok(c) => {
                    for idx in [i * n + j, j * n + i] {
                        acc.sums[idx] += c as f64;
                        acc.counts[idx] += 1;
                    }
                }
                Err(_) => excluded += 1,
            }
        }
    }
    excluded
}

/// Cosine matrices from per-context attention-output vectors.
///
/// `per_context[c][l]` holds the `2S+1` vectors of context `c` at the `l`-th
/// analysed layer, ordered by position.
pub fn cosine_from_vectors(
    per_context: &[Vec<Vec<Vec<f32>>>],
    layers: &[usize],
    span: usize,
) -> Result<CosineMatrixResult> {
    if per_context.is_empty() {
        return Err(Error::EmptyInput("cosine contexts"));
    }
    let side = 2 * span + 1;
    let mut excluded = 0;
    let mut matrices = Vec::with_capacity(layers.len());
    for li in 0..layers.len() {
        let mut acc = CosineAccum {
            sums: vec![0.0; side * side],
            counts: vec![0; side * side],
        };
        for ctx in per_context {
            let vecs: Vec<&[f32]> = ctx[li].iter().map(Vec::as_slice).collect();
            if vecs.len() != side {
                return Err(Error::Analysis(format!(
                    "expected {side} vectors per layer, got {}",
                    vecs.len()
                )));
            }
            excluded += pairwise_cosine(&vecs, &mut acc);
        }
        let data = (0..side * side)
            .map(|idx| {
                if idx / side == idx % side {
                    1.0
                } else if acc.counts[idx] == 0 {
                    0.0
                } else {
                    (acc.sums[idx] / acc.counts[idx] as f64) as f32
                }
            })
            .collect();
        matrices.push(Tensor::new(vec![side, side], data)?);
    }
    if excluded > 0 {
        warn!(
            excluded,
            "zero-norm attention outputs; affected pairs excluded from the averages"
        );
    }
    Ok(CosineMatrixResult {
        span,
        layers: layers.to_vec(),
        matrices,
        contexts: per_context.len(),
        excluded_pairs: excluded,
    })
}

/// Pairwise cosine similarity of attention outputs around the boundary.
pub fn attention_output_cosine(
    contexts: &[SegmentedContext],
    model: &Model,
    layers: &Selection,
    span: usize,
) -> Result<CosineMatrixResult> {
    let n_layers = model.config().n_layers;
    let layer_list: Vec<usize> = (0..n_layers).filter(|&l| layers.contains(l)).collect();
    if layer_list.is_empty() {
        return Err(Error::Param(
            "no layers selected for cosine analysis".into(),
        ));
    }
    let kept = keep_fitting(contexts, span, "cosine span")?;
    let per_context: Vec<Vec<Vec<Vec<f32>>>> = kept
        .par_iter()
        .map(|c| {
            let positions: Vec<usize> = (c.boundary - span..=c.boundary + span).collect();
            let spec = TapSpec::new(
                vec![Site::AttnOut],
                Selection::only(layer_list.clone()),
                Selection::only(positions.clone()),
            )?;
            let snap = capture(model, &c.tokens, &spec)?;
            Ok(layer_list
                .iter()
                .map(|&l| {
                    positions
                        .iter()
                        .map(|&p| {
                            snap.get(Site::AttnOut, l, p)
                                .expect("tapped")
                                .data()
                                .to_vec()
                        })
                        .collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    cosine_from_vectors(&per_context, &layer_list, span)
}

/// Mean within-paragraph and across-paragraph similarity per layer.
pub fn layer_trend_summary(result: &CosineMatrixResult) -> Result<Vec<LayerTrend>> {
    if result.matrices.is_empty() {
        return Err(Error::EmptyInput("cosine result"));
    }
    let side = 2 * result.span + 1;
    let b = result.span;
    Ok(result
        .layers
        .iter()
        .zip(&result.matrices)
        .map(|(&layer, m)| {
            let (mut within, mut nw, mut across, mut na) = (0.0f64, 0usize, 0.0f64, 0usize);
            for i in 0..side {
                for j in i + 1..side {
                    if i == b || j == b {
                        continue;
                    }
                    let v = m.data()[i * side + j] as f64;
                    if (i < b) == (j < b) {
                        within += v;
                        nw += 1;
                    } else {
                        across += v;
                        na += 1;
                    }
                }
            }
            let within_mean = if nw > 0 { within / nw as f64 } else { 0.0 };
            let across_mean = if na > 0 { across / na as f64 } else { 0.0 };
            LayerTrend {
                layer,
                within_mean,
                across_mean,
                gap: within_mean - across_mean,
            }
        })
        .collect())
}

/// Matrix as CSV: header `offset,<-h>,..,<h>`, then one row per query offset.
pub fn matrix_csv(m: &Tensor) -> Result<String> {
    let (rows, cols) = m.dims2()?;
    let half = (cols / 2) as i64;
    let mut s = String::from("offset");
    for c in 0..cols as i64 {
        write!(s, ",{}", c - half).unwrap();
    }
    s.push('\n');
    for r in 0..rows {
        write!(s, "{}", r as i64 - half).unwrap();
        for v in m.row(r) {
            write!(s, ",{v:.6}").unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn trend_csv(trend: &[LayerTrend]) -> String {
    let mut s = String::from("layer,within_mean,across_mean,gap\n");
    for t in trend {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6}",
            t.layer, t.within_mean, t.across_mean, t.gap
        )
        .unwrap();
    }
    s
}

/// Linear colour ramp: `t = (v − lo) / (hi − lo)` clamped to `[0, 1]`, mapped
/// from white `#ffffff` (t = 0) to navy `#08306b` (t = 1) per channel.
pub fn heat_color(v: f32, lo: f32, hi: f32) -> (u8, u8, u8) {
    let t = if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let ch = |end: f32| (255.0 + t * (end - 255.0)).round() as u8;
    (ch(8.0), ch(48.0), ch(107.0))
}

/// Self-contained SVG heatmap with a min/max legend.
pub fn heatmap_svg(m: &Tensor, title: &str, lo: f32, hi: f32) -> Result<String> {
    const CELL: usize = 14;
    const PAD: usize = 40;
    let (rows, cols) = m.dims2()?;
    let (w, h) = (cols * CELL + 2 * PAD, rows * CELL + 2 * PAD + 20);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    let esc = title
        .replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;");
    writeln!(
        s,
        r#"<text x="{PAD}" y="24" font-family="sans-serif" font-size="14">{esc}</text>"#
    )
    .unwrap();
    for r in 0..rows {
        for c in 0..cols {
            let v = m.row(r)[c];
            let (red, green, blue) = heat_color(v, lo, hi);
            writeln!(
                s,
                r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="#{red:02x}{green:02x}{blue:02x}"><title>({r},{c}) {v:.4}</title></rect>"##,
                PAD + c * CELL,
                PAD + r * CELL
            )
            .unwrap();
        }
    }
    writeln!(
        s,
        r#"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="11">scale: {lo:.3} (white) to {hi:.3} (#08306b), linear</text>"#,
        h - 10
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tap::{SiteKey, SnapshotMeta};
    use std::collections::BTreeMap;

    /// Row-stochastic causal attention for `[layers][heads][T][T]`, generated deterministically.
    fn synthetic_attention(
        layers: usize,
        heads: usize,
        t: usize,
        salt: u64,
    ) -> Vec<Vec<Vec<Vec<f32>>>> {
        let mut state = salt;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) + 0.05
        };
        (0..layers)
            .map(|_| {
                (0..heads)
                    .map(|_| {
                        (0..t)
                            .map(|i| {
                                let mut row: Vec<f32> =
                                    (0..t).map(|j| if j <= i { next() } else { 0.0 }).collect();
                                let s: f32 = row.iter().sum();
                                row.iter_mut().for_each(|v| *v /= s);
                                row
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn snapshot_of(att: &[Vec<Vec<Vec<f32>>>]) -> ActivationSnapshot {
        let (layers, heads, t) = (att.len(), att[0].len(), att[0][0].len());
        let mut entries = BTreeMap::new();
        for l in 0..layers {
            for p in 0..t {
                let data: Vec<f32> = (0..heads).flat_map(|h| att[l][h][p].clone()).collect();
                entries.insert(
                    SiteKey {
                        site: Site::AttnWeights,
                        layer: l,
                        position: p,
                    },
                    Tensor::new(vec![heads, t], data).unwrap(),
                );
            }
        }
        ActivationSnapshot::new(
            entries,
            SnapshotMeta {
                model_hash: "synthetic".into(),
                n_layers: layers,
                d_model: 1,
                token_ids: vec![0; t],
                boundary_position: None,
                params: BTreeMap::new(),
            },
        )
        .unwrap()
    }

    #[test]
    fn heatmap_matches_brute_force() {
        let (layers, heads, t, w) = (2, 2, 7, 2);
        let a = synthetic_attention(layers, heads, t, 1);
        let b = synthetic_attention(layers, heads, t, 2);
        let (ba, bb) = (3, 4);
        let (sa, sb) = (snapshot_of(&a), snapshot_of(&b));
        let got = heatmap_from_snapshots(&[(&sa, ba), (&sb, bb)], w).unwrap();

        let side = 2 * w + 1;
        for qi in 0..side {
            for ki in 0..side {
                let mut total = 0.0f64;
                for (att, bd) in [(&a, ba), (&b, bb)] {
                    let mut layer_mean = 0.0f64;
                    for l in 0..layers {
                        let mut head_sum = 0.0f64;
                        for h in 0..heads {
                            head_sum += att[l][h][bd - w + qi][bd - w + ki] as f64;
                        }
                        layer_mean += head_sum / layers as f64;
                    }
                    total += layer_mean / 2.0;
                }
                let v = got.matrix.data()[qi * side + ki] as f64;
                assert!((v - total).abs() < 1e-6, "({qi},{ki}) {v} vs {total}");
                if ki > qi {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert_eq!(got.per_layer.len(), 2);
    }

    #[test]
    fn heatmap_single_context_zero_window() {
        let m = Model::seeded(ModelConfig::tiny(257), 2).unwrap();
        let ctx =
            SegmentedContext::new("c", b"ab\n\ncd".iter().map(|&b| b as TokenId).collect(), 3)
                .unwrap();
        let r = attention_boundary_heatmap(std::slice::from_ref(&ctx), &m, 0).unwrap();
        assert_eq!(r.matrix.shape(), &[1, 1]);
        let spec = TapSpec::new(
            vec![Site::AttnWeights],
            Selection::all(),
            Selection::only([3]),
        )
        .unwrap();
        let snap = capture(&m, ctx.tokens(), &spec).unwrap();
        let expected: f64 = (0..4)
            .map(|l| {
                let p = snap.get(Site::AttnWeights, l, 3).unwrap();
                (0..4).map(|h| p.row(h)[3] as f64).sum::<f64>()
            })
            .sum::<f64>()
            / 4.0;
        assert!((r.matrix.data()[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn heatmap_permutation_invariant_and_skips_short() {
        let m = Model::seeded(ModelConfig::tiny(257), 2).unwrap();
        let mk = |id: &str, s: &str| {
            let toks: Vec<TokenId> = s.bytes().map(TokenId::from).collect();
            let b = s.find("\n\n").unwrap() + 1;
            SegmentedContext::new(id, toks, b).unwrap()
        };
        let a = mk("a", "the first one\n\nand then more");
        let b = mk("b", "another start\n\nwith a new topic");
        let short = mk("s", "x\n\ny");
        let r1 = attention_boundary_heatmap(&[a.clone(), b.clone(), short.clone()], &m, 3).unwrap();
        let r2 = attention_boundary_heatmap(&[b, a], &m, 3).unwrap();
        assert_eq!(r1.contexts, 2);
        for (x, y) in r1.matrix.data().iter().zip(r2.matrix.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(matches!(
            attention_boundary_heatmap(&[short], &m, 3),
            Err(Error::Analysis(_))
        ));
    }

    #[test]
    fn cosine_all_equal_and_orthogonal() {
        let same = vec![vec![vec![vec![1.0, 2.0]; 5]]];
        let r = cosine_from_vectors(&same, &[0], 2).unwrap();
        assert!(r.matrices[0].data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let trend = layer_trend_summary(&r).unwrap();
        assert!(trend[0].gap.abs() < 1e-9);

        let ortho = vec![vec![vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]]]];
        let r = cosine_from_vectors(&ortho, &[0], 1).unwrap();
        assert_eq!(r.matrices[0].data()[2], 0.0);
        assert_eq!(r.matrices[0].data()[6], 0.0);
    }

    #[test]
    fn cosine_matches_brute_force() {
        let vs = [
            vec![0.3f32, -1.2, 2.0],
            vec![1.5, 0.4, -0.7],
            vec![-0.2, 0.9, 0.1],
        ];
        let r = cosine_from_vectors(&[vec![vs.to_vec()]], &[0], 1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = vs[i]
                    .iter()
                    .zip(&vs[j])
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                let ni: f64 = vs[i]
                    .iter()
                    .map(|a| (*a as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let nj: f64 = vs[j]
                    .iter()
                    .map(|a| (*a as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let v = r.matrices[0].data()[i * 3 + j] as f64;
                assert!((v - dot / (ni * nj)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn trend_block_diagonal_gap_one() {
        // span 2 → positions -2..2, boundary at 2
        let side = 5;
        let data: Vec<f32> = (0..side * side)
            .map(|idx| {
                let (i, j) = (idx / side, idx % side);
                if i == j || (i < 2 && j < 2) || (i > 2 && j > 2) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let r = CosineMatrixResult {
            span: 2,
            layers: vec![0],
            matrices: vec![Tensor::new(vec![side, side], data).unwrap()],
            contexts: 1,
            excluded_pairs: 0,
        };
        let t = layer_trend_summary(&r).unwrap();
        assert_eq!(
            (t[0].within_mean, t[0].across_mean, t[0].gap),
            (1.0, 0.0, 1.0)
        );
    }

    #[test]
    fn trend_random_brute_force() {
        let span = 3;
        let side = 7;
        let vals: Vec<f32> = (0..side * side)
            .map(|i| ((i * 37 % 19) as f32 / 9.5) - 1.0)
            .collect();
        let r = CosineMatrixResult {
            span,
            layers: vec![5],
            matrices: vec![Tensor::new(vec![side, side], vals.clone()).unwrap()],
            contexts: 1,
            excluded_pairs: 0,
        };
        let t = layer_trend_summary(&r).unwrap()[0];
        let (mut w, mut a) = (Vec::new(), Vec::new());
        for i in 0..side {
            for j in 0..side {
                if i >= j || i == span || j == span {
                    continue;
                }
                let same = (i < span && j < span) || (i > span && j > span);
                if same { &mut w } else { &mut a }.push(vals[i * side + j] as f64);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((t.within_mean - mean(&w)).abs() < 1e-12);
        assert!((t.across_mean - mean(&a)).abs() < 1e-12);
        assert_eq!(t.layer, 5);
    }

    #[test]
    fn model_cosine_is_symmetric_unit_diagonal() {
        let m = Model::seeded(ModelConfig::tiny(257), 4).unwrap();
        let text = "paragraph one goes here\n\nparagraph two follows it";
        let toks: Vec<TokenId> = text.bytes().map(TokenId::from).collect();
        let ctx = SegmentedContext::new("c", toks, text.find("\n\n").unwrap() + 1).unwrap();
        let r = attention_output_cosine(&[ctx], &m, &Selection::all(), 5).unwrap();
        assert_eq!(r.matrices.len(), 4);
        for mtx in &r.matrices {
            let n = 11;
            for i in 0..n {
                assert!((mtx.data()[i * n + i] - 1.0).abs() < 1e-6);
                for j in 0..n {
                    let (a, b) = (mtx.data()[i * n + j], mtx.data()[j * n + i]);
                    assert!((a - b).abs() < 1e-5 && (-1.0..=1.0).contains(&a));
                }
            }
        }
    }

    #[test]
    fn csv_and_svg_render() {
        let m = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.2, 0.3, 0.5],
        )
        .unwrap();
        let csv = matrix_csv(&m).unwrap();
        assert!(csv.starts_with("offset,-1,0,1\n-1,1.000000,0.000000,0.000000\n"));
        let svg = heatmap_svg(&m, "t <1>", 0.0, 1.0).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("#08306b") && svg.contains("t &lt;1&gt;"));
        assert_eq!(heat_color(0.0, 0.0, 1.0), (255, 255, 255));
        assert_eq!(heat_color(1.0, 0.0, 1.0), (8, 48, 107));
    }
}
