//! Evaluation of generation corpora: embeddings, cosine distances to the
//! original paragraph, per-kind summaries, Welch t-test and a 2-D PCA view.

mod embed;
mod pca;
mod stats;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

pub use embed::{Embedder, EmbeddingVector, ExternalEmbeddings, InternalEmbedder};
pub use pca::{pca_project_2d, Projection};
pub use stats::{
    ln_gamma, regularized_incomplete_beta, sign_test, student_t_two_sided, welch_t_test, SignTest,
    WelchResult,
};

use crate::error::{Error, Result};
use crate::numerics::{cosine_f64, Tensor};
use crate::transfer::{GenerationKind, GenerationRecord};

/// `1 − cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.numel() != b.numel() {
        return Err(Error::Dimension {
            op: "cosine_distance",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok((1.0 - cosine_f64(a.data(), b.data())?) as f32)
}

/// Embeddings keyed by record id, plus records that could not be embedded.
#[derive(Debug, Clone, Default)]
pub struct EmbeddedSet {
    pub vectors: BTreeMap<String, EmbeddingVector>,
    pub skipped: Vec<(String, String)>,
}

/// Embed every record in parallel. Empty texts (a generation that stopped
/// immediately) are skipped with a warning; any other failure is an error.
pub fn embed_records(records: &[GenerationRecord], embedder: &dyn Embedder) -> Result<EmbeddedSet> {
    let results: Vec<(String, Result<EmbeddingVector>)> = records
        .par_iter()
        .map(|r| (r.record_id.clone(), embedder.embed(&r.record_id, &r.text)))
        .collect();
    let mut set = EmbeddedSet::default();
    let mut missing = Vec::new();
    for (id, res) in results {
        match res {
            Ok(v) => {
                set.vectors.insert(id, v);
            }
            Err(Error::EmptyInput(_)) => {
                warn!(record = %id, "empty text; not embedded");
                set.skipped.push((id, "empty text".into()));
            }
            Err(Error::MissingEmbedding(ids)) => missing.extend(ids),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingEmbedding(missing));
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub context_id: String,
    pub kind: GenerationKind,
    pub sample_index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistanceTable {
    pub rows: Vec<DistanceRow>,
}

/// Distance of every non-original record to its context's original record.
/// Rows are ordered by (context id, kind, sample index).
pub fn distance_table(
    records: &[GenerationRecord],
    embedded: &EmbeddedSet,
) -> Result<DistanceTable> {
    let originals: BTreeMap<&str, &GenerationRecord> = records
        .iter()
        .filter(|r| r.kind == GenerationKind::Original)
        .map(|r| (r.context_id.as_str(), r))
        .collect();
    let mut rows = Vec::new();
    for r in records
        .iter()
        .filter(|r| r.kind != GenerationKind::Original)
    {
        let reference = originals.get(r.context_id.as_str()).ok_or_else(|| {
            Error::Analysis(format!("no original record for context {}", r.context_id))
        })?;
        let reference = embedded.vectors.get(&reference.record_id).ok_or_else(|| {
            Error::Analysis(format!(
                "original of context {} was not embedded",
                r.context_id
            ))
        })?;
        let Some(v) = embedded.vectors.get(&r.record_id) else {
            continue;
        };
        rows.push(DistanceRow {
            context_id: r.context_id.clone(),
            kind: r.kind,
            sample_index: r.sample_index,
            distance: cosine_distance(&v.values, &reference.values)? as f64,
        });
    }
    rows.sort_by(|a, b| {
        (&a.context_id, a.kind, a.sample_index).cmp(&(&b.context_id, b.kind, b.sample_index))
    });
    Ok(DistanceTable { rows })
}

impl DistanceTable {
    pub fn of_kind(&self, kind: GenerationKind) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.distance)
            .collect()
    }

    /// Mean distance per context for one kind.
    pub fn context_means(&self, kind: GenerationKind) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.kind == kind) {
            let e = acc.entry(r.context_id.clone()).or_default();
            e.0 += r.distance;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("context_id,kind,sample_index,distance\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{:.6}",
                csv_field(&r.context_id),
                r.kind,
                r.sample_index,
                r.distance
            )
            .unwrap();
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Row order of summaries: the three baselines, then the transferred runs.
pub const SUMMARY_ORDER: [GenerationKind; 4] = [
    GenerationKind::Neutral0,
    GenerationKind::Neutral1,
    GenerationKind::Neutral2,
    GenerationKind::Transferred,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: GenerationKind,
    pub mean: f64,
    /// Sample standard deviation; absent below two samples.
    pub std: Option<f64>,
    pub count: usize,
}

pub fn summarize(table: &DistanceTable) -> Result<Vec<KindSummary>> {
    if table.rows.is_empty() {
        return Err(Error::EmptyInput("distance table"));
    }
    Ok(SUMMARY_ORDER
        .iter()
        .filter_map(|&kind| {
            let mut xs = table.of_kind(kind);
            if xs.is_empty() {
                return None;
            }
            // sorted so the result does not depend on row order
            xs.sort_by(f64::total_cmp);
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let std = (xs.len() >= 2)
                .then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
            Some(KindSummary {
                kind,
                mean,
                std,
                count: xs.len(),
            })
        })
        .collect())
}

/// `kind,mean,std,count`, three decimals; an absent std is an empty field.
pub fn summary_csv(summary: &[KindSummary]) -> String {
    let mut s = String::from("kind,mean,std,count\n");
    for k in summary {
        let std = k.std.map(|v| format!("{v:.3}")).unwrap_or_default();
        writeln!(s, "{},{:.3},{},{}", k.kind, k.mean, std, k.count).unwrap();
    }
    s
}

pub fn summary_json(summary: &[KindSummary]) -> Result<String> {
    Ok(serde_json::to_string_pretty(summary)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestReport {
    pub test: String,
    /// `t` is positive when `x` has the larger mean.
    pub x: GenerationKind,
    pub y: GenerationKind,
    pub n_x: usize,
    pub n_y: usize,
    pub mean_x: f64,
    pub mean_y: f64,
    pub t: f64,
    pub df: f64,
    pub p_two_sided: f64,
}

pub fn t_test_report(
    table: &DistanceTable,
    x: GenerationKind,
    y: GenerationKind,
) -> Result<TTestReport> {
    let (xs, ys) = (table.of_kind(x), table.of_kind(y));
    let r = welch_t_test(&xs, &ys)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(TTestReport {
        test: "welch".into(),
        x,
        y,
        n_x: xs.len(),
        n_y: ys.len(),
        mean_x: mean(&xs),
        mean_y: mean(&ys),
        t: r.t,
        df: r.df,
        p_two_sided: r.p,
    })
}

/// PCA of every embedded record, emitted as `record_id,kind,x,y`.
pub fn projection_csv(records: &[GenerationRecord], embedded: &EmbeddedSet) -> Result<String> {
    let kept: Vec<&GenerationRecord> = records
        .iter()
        .filter(|r| embedded.vectors.contains_key(&r.record_id))
        .collect();
    let vectors: Vec<Vec<f32>> = kept
        .iter()
        .map(|r| embedded.vectors[&r.record_id].values.data().to_vec())
        .collect();
    let p = pca_project_2d(&vectors)?;
    let mut s = String::from("record_id,kind,x,y\n");
    for (r, (x, y)) in kept.iter().zip(&p.points) {
        writeln!(s, "{},{},{x:.6},{y:.6}", csv_field(&r.record_id), r.kind).unwrap();
    }
    Ok(s)
}
