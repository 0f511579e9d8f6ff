//! Run configuration. Relative paths resolve against the config file's
//! directory; `--out` overrides `output_dir`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _, Result};
use serde::Deserialize;

use seampatch::model::{Model, ModelConfig, SamplingParams};
use seampatch::tap::{Selection, Site};
use seampatch::tokenizer::{BpeTokenizer, ByteTokenizer, TokenId, Tokenizer};
use seampatch::transfer::{ExperimentPlan, GenerationKind};

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    /// A `TARC0001` weight archive.
    Archive(PathBuf),
    /// Random weights from a seed.
    Seeded { config: ModelConfig, seed: u64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TokenizerConfig {
    Gpt2 {
        vocab: PathBuf,
        merges: PathBuf,
        #[serde(default)]
        bos: Option<TokenId>,
    },
    Bytes,
}

fn default_window() -> usize {
    10
}

fn default_span() -> usize {
    25
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_span")]
    pub span: usize,
    #[serde(default = "Selection::all")]
    pub layers: Selection,
    /// Also write one heatmap per layer.
    #[serde(default)]
    pub per_layer: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            window: default_window(),
            span: default_span(),
            layers: Selection::all(),
            per_layer: false,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default = "TransferConfig::default_samples")]
    pub n_samples: usize,
    #[serde(default = "TransferConfig::default_k_cheat")]
    pub k_cheat: Vec<usize>,
    #[serde(default = "TransferConfig::default_sites")]
    pub sites: Vec<Site>,
    /// Stop sampling at the tokenizer's BOS id (GPT-2's `<|endoftext|>`).
    #[serde(default = "default_true")]
    pub stop_at_bos: bool,
    #[serde(default = "default_true")]
    pub save_snapshots: bool,
}

impl TransferConfig {
    fn default_samples() -> usize {
        5
    }

    fn default_k_cheat() -> Vec<usize> {
        vec![0, 1, 2]
    }

    fn default_sites() -> Vec<Site> {
        vec![Site::BlockOut]
    }

    pub fn plan(&self, tokenizer: &dyn Tokenizer) -> ExperimentPlan {
        let mut params = self.sampling.clone();
        if self.stop_at_bos && !params.stop_tokens.contains(&tokenizer.bos_id()) {
            params.stop_tokens.push(tokenizer.bos_id());
        }
        ExperimentPlan {
            params,
            n_samples: self.n_samples,
            k_cheat: self.k_cheat.clone(),
            sites: self.sites.clone(),
        }
    }
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingParams::default(),
            n_samples: Self::default_samples(),
            k_cheat: Self::default_k_cheat(),
            sites: Self::default_sites(),
            stop_at_bos: true,
            save_snapshots: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingConfig {
    Internal,
    External { archive: PathBuf },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default = "EvaluateConfig::default_embedding")]
    pub embedding: EmbeddingConfig,
    /// `[x, y]`; t is positive when x has the larger mean distance.
    #[serde(default = "EvaluateConfig::default_t_test")]
    pub t_test: [GenerationKind; 2],
    /// Where `{kind}.jsonl` files are read from; defaults to `<output_dir>/generations`.
    #[serde(default)]
    pub generations_dir: Option<PathBuf>,
}

impl EvaluateConfig {
    fn default_embedding() -> EmbeddingConfig {
        EmbeddingConfig::Internal
    }

    fn default_t_test() -> [GenerationKind; 2] {
        [GenerationKind::Transferred, GenerationKind::Neutral2]
    }
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            embedding: Self::default_embedding(),
            t_test: Self::default_t_test(),
            generations_dir: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub contexts: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn require_file(what: &str, p: &Path) -> Result<()> {
    if !p.is_file() {
        bail!("{what} not found: {}", p.display());
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path, out_override: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow!("invalid config {}: {e}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if let ModelSource::Archive(p) = &mut cfg.model {
            resolve(&base, p);
        }
        if let TokenizerConfig::Gpt2 { vocab, merges, .. } = &mut cfg.tokenizer {
            resolve(&base, vocab);
            resolve(&base, merges);
        }
        if let Some(c) = &mut cfg.contexts {
            resolve(&base, c);
        }
        if let EmbeddingConfig::External { archive } = &mut cfg.evaluate.embedding {
            resolve(&base, archive);
        }
        if let Some(g) = &mut cfg.evaluate.generations_dir {
            resolve(&base, g);
        }
        match out_override {
            Some(o) => cfg.output_dir = o.to_path_buf(),
            None => resolve(&base, &mut cfg.output_dir),
        }
        Ok(cfg)
    }

    /// Checks shared by every command.
    pub fn validate_common(&self) -> Result<()> {
        match &self.model {
            ModelSource::Archive(p) => require_file("model archive", p)?,
            ModelSource::Seeded { config, .. } => config
                .validate()
                .map_err(|e| anyhow!("model.seeded.config: {e}"))?,
        }
        if let TokenizerConfig::Gpt2 { vocab, merges, .. } = &self.tokenizer {
            require_file("tokenizer vocab", vocab)?;
            require_file("tokenizer merges", merges)?;
        }
        Ok(())
    }

    pub fn contexts_path(&self) -> Result<&Path> {
        let p = self
            .contexts
            .as_deref()
            .ok_or_else(|| anyhow!("config has no \"contexts\" file"))?;
        require_file("contexts file", p)?;
        Ok(p)
    }

    pub fn validate_analysis(&self) -> Result<()> {
        if self.analysis.span == 0 {
            bail!("analysis.span must be at least 1");
        }
        Ok(())
    }

    pub fn validate_transfer(&self) -> Result<()> {
        let t = &self.transfer;
        let plan = ExperimentPlan {
            params: t.sampling.clone(),
            n_samples: t.n_samples,
            k_cheat: t.k_cheat.clone(),
            sites: t.sites.clone(),
        };
        plan.validate().map_err(|e| anyhow!("transfer: {e}"))
    }

    pub fn validate_evaluate(&self) -> Result<()> {
        if let EmbeddingConfig::External { archive } = &self.evaluate.embedding {
            require_file("external embedding archive", archive)?;
        }
        let [x, y] = self.evaluate.t_test;
        if x == y || x == GenerationKind::Original || y == GenerationKind::Original {
            bail!("evaluate.t_test must name two different generated kinds, got [{x}, {y}]");
        }
        Ok(())
    }

    pub fn generations_dir(&self) -> PathBuf {
        self.evaluate
            .generations_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("generations"))
    }

    pub fn build_tokenizer(&self) -> Result<Box<dyn Tokenizer>> {
        Ok(match &self.tokenizer {
            TokenizerConfig::Gpt2 { vocab, merges, bos } => {
                Box::new(BpeTokenizer::from_files(vocab, merges, *bos)?)
            }
            TokenizerConfig::Bytes => Box::new(ByteTokenizer::new()),
        })
    }

    pub fn build_model(&self, tokenizer: &dyn Tokenizer) -> Result<Model> {
        let model = match &self.model {
            ModelSource::Archive(p) => Model::load(p, None)?,
            ModelSource::Seeded { config, seed } => Model::seeded(config.clone(), *seed)?,
        };
        let vocab = model.config().vocab_size;
        if tokenizer.vocab_size() > vocab || tokenizer.bos_id() as usize >= vocab {
            bail!(
                "tokenizer (vocab {}, bos {}) does not fit the model's vocabulary of {vocab}",
                tokenizer.vocab_size(),
                tokenizer.bos_id()
            );
        }
        Ok(model)
    }
}
