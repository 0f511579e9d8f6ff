//! Activation taps, snapshots and patch plans: the bridge between a donor
//! forward pass and a recipient forward pass.
//!
//! Sites:
//!
//! - `embedding_out`: token + position embedding (keyed as layer 0)
//! - `attn_weights`: post-softmax probabilities for one query position, `[H × seq]`
//! - `attn_out`: attention sublayer output after the output projection
//! - `mid_residual`: residual stream after the attention add, before the MLP
//! - `block_out`: residual stream after the MLP add
//!
//! A patch overwrites the value at its site before anything downstream reads
//! it. A `block_out` patch at layer ℓ therefore feeds layer ℓ+1's Q/K/V at that
//! position, and one at the last layer fixes the logits there.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    EmbeddingOut,
    AttnWeights,
    AttnOut,
    MidResidual,
    BlockOut,
}

impl Site {
    pub const ALL: [Site; 5] = [
        Site::EmbeddingOut,
        Site::AttnWeights,
        Site::AttnOut,
        Site::MidResidual,
        Site::BlockOut,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::EmbeddingOut => "embedding_out",
            Site::AttnWeights => "attn_weights",
            Site::AttnOut => "attn_out",
            Site::MidResidual => "mid_residual",
            Site::BlockOut => "block_out",
        }
    }

    pub fn is_patchable(self) -> bool {
        self != Site::AttnWeights
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Site {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.as_str() == s)
            .ok_or_else(|| Error::Param(format!("unknown site {s:?}")))
    }
}

/// `"all"` or an explicit index list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Selection {
    All(AllTag),
    Only(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllTag {
    All,
}

impl Selection {
    pub fn all() -> Self {
        Selection::All(AllTag::All)
    }

    pub fn only(items: impl IntoIterator<Item = usize>) -> Self {
        Selection::Only(items.into_iter().collect())
    }

    pub fn contains(&self, i: usize) -> bool {
        match self {
            Selection::All(_) => true,
            Selection::Only(v) => v.contains(&i),
        }
    }

    fn check(&self, what: &str, bound: usize) -> Result<()> {
        if let Selection::Only(v) = self {
            if let Some(bad) = v.iter().find(|&&i| i >= bound) {
                return Err(Error::Range(format!(
                    "{what} {bad} out of range (< {bound})"
                )));
            }
        }
        Ok(())
    }
}

/// Which activations to record during a forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    pub sites: Vec<Site>,
    pub layers: Selection,
    pub positions: Selection,
}

impl TapSpec {
    pub fn new(sites: Vec<Site>, layers: Selection, positions: Selection) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::Param("tap spec needs at least one site".into()));
        }
        Ok(Self {
            sites,
            layers,
            positions,
        })
    }

    /// `block_out` at every layer for one position.
    pub fn block_out_at(position: usize) -> Self {
        Self {
            sites: vec![Site::BlockOut],
            layers: Selection::all(),
            positions: Selection::only([position]),
        }
    }

    pub fn validate(&self, n_layers: usize, seq_len: usize) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::Param("tap spec needs at least one site".into()));
        }
        self.layers.check("layer", n_layers)?;
        self.positions.check("position", seq_len)
    }

    pub(crate) fn wants(&self, site: Site, layer: usize) -> bool {
        self.sites.contains(&site) && (site == Site::EmbeddingOut || self.layers.contains(layer))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteKey {
    pub site: Site,
    pub layer: usize,
    pub position: usize,
}

impl fmt::Display for SiteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.L{}.P{}", self.site, self.layer, self.position)
    }
}

impl SiteKey {
    fn archive_name(&self) -> String {
        self.to_string()
    }

    fn parse_archive_name(name: &str) -> Result<Self> {
        let bad = || {
            Error::Format(format!(
                "snapshot tensor name {name:?} is not <site>.L<layer>.P<pos>"
            ))
        };
        let mut parts = name.split('.');
        let (Some(site), Some(l), Some(p), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        Ok(Self {
            site: site.parse().map_err(|_| bad())?,
            layer: l
                .strip_prefix('L')
                .and_then(|s| s.parse().ok())
                .ok_or_else(bad)?,
            position: p
                .strip_prefix('P')
                .and_then(|s| s.parse().ok())
                .ok_or_else(bad)?,
        })
    }
}

/// Provenance of a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub model_hash: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub token_ids: Vec<TokenId>,
    pub boundary_position: Option<usize>,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

/// Captured activations. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSnapshot {
    entries: BTreeMap<SiteKey, Tensor>,
    meta: SnapshotMeta,
}

const ROW_SUM_TOL: f32 = 1e-5;

impl ActivationSnapshot {
    pub fn new(entries: BTreeMap<SiteKey, Tensor>, meta: SnapshotMeta) -> Result<Self> {
        for (key, t) in &entries {
            if key.site == Site::AttnWeights {
                let (rows, _) = t.dims2()?;
                for r in 0..rows {
                    let sum: f32 = t.row(r).iter().sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(Error::Format(format!(
                            "{}: attention row {r} sums to {sum}",
                            key.archive_name()
                        )));
                    }
                }
            } else if t.numel() != meta.d_model {
                return Err(Error::Format(format!(
                    "{}: vector of length {} but d_model is {}",
                    key.archive_name(),
                    t.numel(),
                    meta.d_model
                )));
            }
        }
        Ok(Self { entries, meta })
    }

    pub fn entries(&self) -> &BTreeMap<SiteKey, Tensor> {
        &self.entries
    }

    pub fn get(&self, site: Site, layer: usize, position: usize) -> Option<&Tensor> {
        self.entries.get(&SiteKey {
            site,
            layer,
            position,
        })
    }

    pub fn meta(&self) -> &SnapshotMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A copy with extra provenance fields.
    pub fn with_boundary(
        mut self,
        boundary: Option<usize>,
        params: BTreeMap<String, Value>,
    ) -> Self {
        self.meta.boundary_position = boundary;
        self.meta.params.extend(params);
        self
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        for (k, t) in &self.entries {
            a.insert(k.archive_name(), t.clone());
        }
        a.set_meta("kind", Value::String("activation_snapshot".into()));
        a.set_meta("snapshot", serde_json::to_value(&self.meta)?);
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.meta().get("kind").and_then(Value::as_str) != Some("activation_snapshot") {
            return Err(Error::Format(
                "archive is not an activation snapshot (meta.kind)".into(),
            ));
        }
        let meta: SnapshotMeta = a
            .meta()
            .get("snapshot")
            .cloned()
            .ok_or_else(|| Error::Format("snapshot archive has no meta.snapshot".into()))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| Error::Format(format!("meta.snapshot: {e}")))
            })?;
        let entries = a
            .tensors()
            .iter()
            .map(|(name, t)| Ok((SiteKey::parse_archive_name(name)?, t.clone())))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::new(entries, meta)
    }
}

pub fn save_snapshot(snapshot: &ActivationSnapshot, path: impl AsRef<Path>) -> Result<()> {
    snapshot.to_archive()?.save(path)
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<ActivationSnapshot> {
    ActivationSnapshot::from_archive(&Archive::load(path)?)
}

/// Run one teacher-forced forward pass over `tokens` and record `spec`.
pub fn capture(model: &Model, tokens: &[TokenId], spec: &TapSpec) -> Result<ActivationSnapshot> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("capture tokens"));
    }
    spec.validate(model.config().n_layers, tokens.len())?;
    let mut cache = model.new_cache();
    let out = model.forward(tokens, &mut cache, Some(spec), None)?;
    Ok(out.captured.expect("taps requested"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEntry {
    pub site: Site,
    pub layer: usize,
    pub position: usize,
    pub vector: Tensor,
}

/// Recipient-side overwrite instructions, bound to the donor model's hash.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlan {
    model_hash: String,
    entries: Vec<PatchEntry>,
}

impl PatchPlan {
    pub fn new(model_hash: impl Into<String>, mut entries: Vec<PatchEntry>) -> Result<Self> {
        entries.sort_by_key(|e| (e.site, e.layer, e.position));
        for w in entries.windows(2) {
            if (w[0].site, w[0].layer, w[0].position) == (w[1].site, w[1].layer, w[1].position) {
                return Err(Error::Patch(format!(
                    "duplicate entry for {} layer {} position {}",
                    w[0].site, w[0].layer, w[0].position
                )));
            }
        }
        if let Some(e) = entries.iter().find(|e| !e.site.is_patchable()) {
            return Err(Error::Patch(format!("site {} cannot be patched", e.site)));
        }
        Ok(Self {
            model_hash: model_hash.into(),
            entries,
        })
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn entries(&self) -> &[PatchEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub(crate) fn lookup(&self, site: Site, layer: usize) -> impl Iterator<Item = &PatchEntry> {
        self.entries
            .iter()
            .filter(move |e| e.site == site && e.layer == layer)
    }
}

/// Retarget a single-position residual-stream snapshot onto `recipient_position`.
///
/// `block_out` must be present for every layer. `mid_residual` and
/// `embedding_out` entries are carried over when the snapshot has them.
pub fn build_patch_plan(
    snapshot: &ActivationSnapshot,
    recipient_position: usize,
) -> Result<PatchPlan> {
    let residual: Vec<(&SiteKey, &Tensor)> = snapshot
        .entries
        .iter()
        .filter(|(k, _)| {
            matches!(
                k.site,
                Site::BlockOut | Site::MidResidual | Site::EmbeddingOut
            )
        })
        .collect();
    let positions: BTreeSet<usize> = residual.iter().map(|(k, _)| k.position).collect();
    if positions.len() > 1 {
        return Err(Error::AmbiguousSnapshot {
            positions: positions.into_iter().collect(),
        });
    }
    let n_layers = snapshot.meta.n_layers;
    for site in [Site::BlockOut, Site::MidResidual] {
        let have: BTreeSet<usize> = residual
            .iter()
            .filter(|(k, _)| k.site == site)
            .map(|(k, _)| k.layer)
            .collect();
        if site == Site::MidResidual && have.is_empty() {
            continue;
        }
        let missing: Vec<usize> = (0..n_layers).filter(|l| !have.contains(l)).collect();
        if !missing.is_empty() {
            return Err(Error::IncompleteSnapshot { missing });
        }
    }
    let entries = residual
        .into_iter()
        .map(|(k, t)| PatchEntry {
            site: k.site,
            layer: k.layer,
            position: recipient_position,
            vector: t.clone(),
        })
        .collect();
    PatchPlan::new(snapshot.meta.model_hash.clone(), entries)
}
