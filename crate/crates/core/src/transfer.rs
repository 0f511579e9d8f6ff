//! Generation experiments around the paragraph boundary.
//!
//! For each two-paragraph context the donor pass is a teacher-forced forward
//! over the full text. Its residual stream at the boundary token, at every
//! layer, is patched into the last position of the neutral prompt
//! `[BOS] + encode("\n\n")`, and the patched model continues from there
//! (`transferred`). Baselines sample from the same prompt without patches
//! (`neutral0`) or with the first one or two words of the true second
//! paragraph appended (`neutral1`, `neutral2`). The `original` record holds
//! the true second paragraph as the comparison reference.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::SegmentedContext;
use crate::error::{Error, Result};
use crate::model::{Generation, Model, SamplingParams};
use crate::tap::{
    build_patch_plan, capture, ActivationSnapshot, PatchPlan, Selection, Site, TapSpec,
};
use crate::tokenizer::{
    find_paragraph_break, locate_boundary_token, TokenId, Tokenizer, PARAGRAPH_BREAK,
};

/// One input line: `{"id", "text", "topic_a"?, "topic_b"?}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_b: Option<String>,
}

/// A validated context with its tokens and boundary token index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub spec: ContextSpec,
    tokens: Vec<TokenId>,
    boundary: usize,
    break_at: usize,
}

impl Context {
    pub fn new(spec: ContextSpec, tokenizer: &dyn Tokenizer) -> Result<Self> {
        let break_at = find_paragraph_break(&spec.text)?;
        let seq = tokenizer.encode(&spec.text)?;
        let boundary = locate_boundary_token(tokenizer, &seq)?;
        Ok(Self {
            spec,
            tokens: seq.ids,
            boundary,
            break_at,
        })
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn first_paragraph(&self) -> &str {
        &self.spec.text[..self.break_at]
    }

    pub fn segmented(&self) -> Result<SegmentedContext> {
        SegmentedContext::new(self.spec.id.clone(), self.tokens.clone(), self.boundary)
    }
}

/// Paragraph 2, byte-exact: everything after the `"\n\n"`.
pub fn slice_original_reference(context: &Context) -> &str {
    &context.spec.text[context.break_at + PARAGRAPH_BREAK.len()..]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    /// 1-based line number in the input file.
    pub line: usize,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub accepted: Vec<Context>,
    pub rejected: Vec<Rejection>,
}

/// Parse contexts JSONL. Malformed or invalid lines are rejected with a
/// reason; blank lines are ignored; a file with no records is an error.
pub fn parse_contexts(jsonl: &str, tokenizer: &dyn Tokenizer) -> Result<Ingested> {
    let mut out = Ingested::default();
    let mut seen = HashSet::new();
    let mut records = 0;
    for (idx, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records += 1;
        let reject = |id: Option<String>, reason: String| Rejection {
            line: idx + 1,
            id,
            reason,
        };
        let spec: ContextSpec = match serde_json::from_str(line) {
            Ok(s) => s,
            Err(e) => {
                out.rejected
                    .push(reject(None, format!("invalid JSON: {e}")));
                continue;
            }
        };
        if !seen.insert(spec.id.clone()) {
            out.rejected
                .push(reject(Some(spec.id), "duplicate id".into()));
            continue;
        }
        let id = spec.id.clone();
        match Context::new(spec, tokenizer) {
            Ok(c) => out.accepted.push(c),
            Err(e) => out.rejected.push(reject(Some(id), e.to_string())),
        }
    }
    if records == 0 {
        return Err(Error::EmptyInput("contexts file"));
    }
    Ok(out)
}

pub fn ingest_contexts(path: impl AsRef<Path>, tokenizer: &dyn Tokenizer) -> Result<Ingested> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_contexts(&text, tokenizer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationKind {
    Original,
    Transferred,
    Neutral0,
    Neutral1,
    Neutral2,
}

impl GenerationKind {
    pub const ALL: [GenerationKind; 5] = [
        GenerationKind::Original,
        GenerationKind::Transferred,
        GenerationKind::Neutral0,
        GenerationKind::Neutral1,
        GenerationKind::Neutral2,
    ];

    pub fn neutral(k_cheat: usize) -> Result<Self> {
        match k_cheat {
            0 => Ok(Self::Neutral0),
            1 => Ok(Self::Neutral1),
            2 => Ok(Self::Neutral2),
            k => Err(Error::Param(format!("k_cheat must be 0, 1 or 2, got {k}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::Transferred => "transferred",
            Self::Neutral0 => "neutral0",
            Self::Neutral1 => "neutral1",
            Self::Neutral2 => "neutral2",
        }
    }
}

impl fmt::Display for GenerationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GenerationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Param(format!("unknown generation kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// `{context_id}/{kind}/{sample_index}`; the key for external embeddings.
    pub record_id: String,
    pub context_id: String,
    pub kind: GenerationKind,
    pub sample_index: usize,
    pub seed: u64,
    pub params: SamplingParams,
    pub prompt_ids: Vec<TokenId>,
    pub generated_ids: Vec<TokenId>,
    pub text: String,
}

impl GenerationRecord {
    fn new(
        context_id: &str,
        kind: GenerationKind,
        sample_index: usize,
        params: SamplingParams,
        generation: Generation,
        tokenizer: &dyn Tokenizer,
    ) -> Result<Self> {
        Ok(Self {
            record_id: format!("{context_id}/{kind}/{sample_index}"),
            context_id: context_id.to_string(),
            kind,
            sample_index,
            seed: params.seed,
            text: tokenizer.decode(&generation.generated_ids)?,
            params,
            prompt_ids: generation.prompt_ids,
            generated_ids: generation.generated_ids,
        })
    }
}

/// `[BOS] + encode("\n\n")`.
pub fn neutral_prompt(tokenizer: &dyn Tokenizer) -> Result<Vec<TokenId>> {
    let mut ids = vec![tokenizer.bos_id()];
    ids.extend(tokenizer.encode(PARAGRAPH_BREAK)?.ids);
    Ok(ids)
}

/// Tokens of `" " + first k words` of `paragraph`, or nothing for `k = 0`.
pub fn cheat_tokens(
    paragraph: &str,
    k_cheat: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<TokenId>> {
    GenerationKind::neutral(k_cheat)?;
    if k_cheat == 0 {
        return Ok(Vec::new());
    }
    let words: Vec<&str> = paragraph.split_whitespace().take(k_cheat).collect();
    if words.len() < k_cheat {
        return Err(Error::Param(format!(
            "paragraph has {} words, {k_cheat} cheat words requested",
            words.len()
        )));
    }
    Ok(tokenizer.encode(&format!(" {}", words.join(" ")))?.ids)
}

/// Donor snapshot at `position` over `tokens` for the given patchable sites, all layers.
pub fn donor_snapshot(
    model: &Model,
    tokens: &[TokenId],
    position: usize,
    sites: &[Site],
) -> Result<ActivationSnapshot> {
    if sites.is_empty() || !sites.contains(&Site::BlockOut) {
        return Err(Error::Param("transfer sites must include block_out".into()));
    }
    if let Some(s) = sites.iter().find(|s| !s.is_patchable()) {
        return Err(Error::Param(format!("site {s} cannot be transferred")));
    }
    let spec = TapSpec::new(
        sites.to_vec(),
        Selection::all(),
        Selection::only([position]),
    )?;
    Ok(capture(model, tokens, &spec)?.with_boundary(Some(position), BTreeMap::new()))
}

/// Continue `recipient_prompt` with the donor snapshot patched into its last position.
pub fn generate_with_transfer(
    model: &Model,
    donor: &ActivationSnapshot,
    recipient_prompt: &[TokenId],
    params: &SamplingParams,
) -> Result<Generation> {
    let target = recipient_prompt
        .len()
        .checked_sub(1)
        .ok_or(Error::EmptyInput("recipient prompt"))?;
    let plan: PatchPlan = build_patch_plan(donor, target)?;
    model.generate(recipient_prompt, params, Some(&plan))
}

fn sampled(
    n_samples: usize,
    params: &SamplingParams,
) -> impl Iterator<Item = (usize, SamplingParams)> + '_ {
    (0..n_samples).map(move |i| (i, params.with_seed(params.seed.wrapping_add(i as u64))))
}

/// `n_samples` transferred generations with seeds `params.seed + i`.
pub fn run_transferred(
    context: &Context,
    model: &Model,
    tokenizer: &dyn Tokenizer,
    params: &SamplingParams,
    n_samples: usize,
) -> Result<Vec<GenerationRecord>> {
    let donor = donor_snapshot(
        model,
        context.tokens(),
        context.boundary(),
        &[Site::BlockOut],
    )?;
    transferred_from(context, &donor, model, tokenizer, params, n_samples)
}

fn transferred_from(
    context: &Context,
    donor: &ActivationSnapshot,
    model: &Model,
    tokenizer: &dyn Tokenizer,
    params: &SamplingParams,
    n_samples: usize,
) -> Result<Vec<GenerationRecord>> {
    let prompt = neutral_prompt(tokenizer)?;
    sampled(n_samples, params)
        .map(|(i, p)| {
            let g = generate_with_transfer(model, donor, &prompt, &p)?;
            GenerationRecord::new(
                context.id(),
                GenerationKind::Transferred,
                i,
                p,
                g,
                tokenizer,
            )
        })
        .collect()
}

/// `n_samples` unpatched generations from the neutral prompt plus `k_cheat` words.
pub fn run_neutral(
    context: &Context,
    model: &Model,
    tokenizer: &dyn Tokenizer,
    params: &SamplingParams,
    k_cheat: usize,
    n_samples: usize,
) -> Result<Vec<GenerationRecord>> {
    let kind = GenerationKind::neutral(k_cheat)?;
    let mut prompt = neutral_prompt(tokenizer)?;
    prompt.extend(cheat_tokens(
        slice_original_reference(context),
        k_cheat,
        tokenizer,
    )?);
    sampled(n_samples, params)
        .map(|(i, p)| {
            let g = model.generate(&prompt, &p, None)?;
            GenerationRecord::new(context.id(), kind, i, p, g, tokenizer)
        })
        .collect()
}

/// The reference record: prompt is the context through the boundary token,
/// generated ids are the tokens of paragraph 2.
pub fn original_record(
    context: &Context,
    tokenizer: &dyn Tokenizer,
    params: &SamplingParams,
) -> Result<GenerationRecord> {
    let reference = slice_original_reference(context);
    let generation = Generation {
        prompt_ids: context.tokens()[..=context.boundary()].to_vec(),
        generated_ids: tokenizer.encode(reference)?.ids,
    };
    let mut record = GenerationRecord::new(
        context.id(),
        GenerationKind::Original,
        0,
        params.clone(),
        generation,
        tokenizer,
    )?;
    record.text = reference.to_string();
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub params: SamplingParams,
    pub n_samples: usize,
    pub k_cheat: Vec<usize>,
    /// Sites transferred at every layer. `block_out` is required;
    /// `mid_residual` and `embedding_out` are optional extras.
    pub sites: Vec<Site>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            params: SamplingParams::default(),
            n_samples: 5,
            k_cheat: vec![0, 1, 2],
            sites: vec![Site::BlockOut],
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.n_samples == 0 {
            return Err(Error::Param("n_samples must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for &k in &self.k_cheat {
            GenerationKind::neutral(k)?;
            if !seen.insert(k) {
                return Err(Error::Param(format!("k_cheat {k} listed twice")));
            }
        }
        if !self.sites.contains(&Site::BlockOut) || self.sites.iter().any(|s| !s.is_patchable()) {
            return Err(Error::Param(format!(
                "invalid transfer sites {:?}",
                self.sites
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContextOutcome {
    pub context_id: String,
    pub donor: ActivationSnapshot,
    /// Keyed by kind; each list is ordered by sample index.
    pub records: BTreeMap<GenerationKind, Vec<GenerationRecord>>,
}

pub fn run_context(
    context: &Context,
    model: &Model,
    tokenizer: &dyn Tokenizer,
    plan: &ExperimentPlan,
) -> Result<ContextOutcome> {
    let donor = donor_snapshot(model, context.tokens(), context.boundary(), &plan.sites)?;
    let mut records = BTreeMap::new();
    records.insert(
        GenerationKind::Original,
        vec![original_record(context, tokenizer, &plan.params)?],
    );
    records.insert(
        GenerationKind::Transferred,
        transferred_from(
            context,
            &donor,
            model,
            tokenizer,
            &plan.params,
            plan.n_samples,
        )?,
    );
    for &k in &plan.k_cheat {
        records.insert(
            GenerationKind::neutral(k)?,
            run_neutral(context, model, tokenizer, &plan.params, k, plan.n_samples)?,
        );
    }
    Ok(ContextOutcome {
        context_id: context.id().to_string(),
        donor,
        records,
    })
}

/// Run every context in parallel. Results come back sorted by context id,
/// independent of scheduling; per-context failures are returned, not raised.
pub fn run_experiment(
    contexts: &[Context],
    model: &Model,
    tokenizer: &dyn Tokenizer,
    plan: &ExperimentPlan,
) -> Result<Vec<(String, Result<ContextOutcome>)>> {
    plan.validate()?;
    let mut out: Vec<(String, Result<ContextOutcome>)> = contexts
        .par_iter()
        .map(|c| (c.id().to_string(), run_context(c, model, tokenizer, plan)))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// One JSON object per line, in the given order.
pub fn records_jsonl<'a>(
    records: impl IntoIterator<Item = &'a GenerationRecord>,
) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<GenerationRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::ByteTokenizer;

    fn spec(id: &str, text: &str) -> ContextSpec {
        ContextSpec {
            id: id.into(),
            text: text.into(),
            topic_a: None,
            topic_b: None,
        }
    }

    fn tiny() -> Model {
        Model::seeded(ModelConfig::tiny(257), 11).unwrap()
    }

    #[test]
    fn ingest_accepts_and_rejects() {
        let t = ByteTokenizer::new();
        let input = concat!(
            r#"{"id":"a","text":"aaa\n\nbbb"}"#,
            "\n",
            r#"{"id":"b","text":"aaabbb"}"#,
            "\n\n",
            r#"{"id":"c","text":"a\n\nb\n\nc"}"#,
            "\n",
            r#"{"id":"a","text":"x\n\ny"}"#,
            "\nnot json\n"
        );
        let got = parse_contexts(input, &t).unwrap();
        assert_eq!(got.accepted.len(), 1);
        assert_eq!(got.accepted[0].boundary(), 4);
        let reasons: Vec<_> = got
            .rejected
            .iter()
            .map(|r| (r.line, r.reason.as_str()))
            .collect();
        assert_eq!(reasons.len(), 4);
        assert!(reasons[0].1.contains("boundary") && reasons[0].0 == 2);
        assert!(
            reasons[1].1.contains("ambiguous") || reasons[1].1.contains("2"),
            "{reasons:?}"
        );
        assert_eq!(reasons[2].1, "duplicate id");
        assert!(reasons[3].1.starts_with("invalid JSON"));
        assert!(matches!(
            parse_contexts("\n \n", &t),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn reference_slicing() {
        let t = ByteTokenizer::new();
        let c = Context::new(spec("x", "A\n\nB"), &t).unwrap();
        assert_eq!(slice_original_reference(&c), "B");
        let c = Context::new(spec("x", "First part.\n\n  Second kept"), &t).unwrap();
        assert_eq!(slice_original_reference(&c), "  Second kept");
        assert_eq!(
            format!(
                "{}\n\n{}",
                c.first_paragraph(),
                slice_original_reference(&c)
            ),
            c.spec.text
        );
    }

    #[test]
    fn neutral_prompts() {
        let t = ByteTokenizer::new();
        let m = tiny();
        let c = Context::new(spec("x", "Intro text.\n\nSolar power is cheap now"), &t).unwrap();
        let p = SamplingParams::greedy(3);
        let n0 = run_neutral(&c, &m, &t, &p, 0, 1).unwrap();
        assert_eq!(n0[0].prompt_ids, vec![256, 10, 10]);
        let n2 = run_neutral(&c, &m, &t, &p, 2, 1).unwrap();
        assert!(n2[0]
            .prompt_ids
            .ends_with(&t.encode(" Solar power").unwrap().ids));
        assert_eq!(n2[0].record_id, "x/neutral2/0");
        assert!(matches!(
            run_neutral(&c, &m, &t, &p, 3, 1),
            Err(Error::Param(_))
        ));
        let short = Context::new(spec("y", "a\n\nb"), &t).unwrap();
        assert!(matches!(
            run_neutral(&short, &m, &t, &p, 2, 1),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn transferred_seeds_and_prompt() {
        let t = ByteTokenizer::new();
        let m = tiny();
        let c = Context::new(
            spec("ctx", "The moon is bright.\n\nOceans cover the earth."),
            &t,
        )
        .unwrap();
        let params = SamplingParams {
            temperature: 0.9,
            seed: 40,
            max_new_tokens: 8,
            ..SamplingParams::default()
        };
        let recs = run_transferred(&c, &m, &t, &params, 3).unwrap();
        assert_eq!(
            recs.iter().map(|r| r.seed).collect::<Vec<_>>(),
            vec![40, 41, 42]
        );
        let neutral = run_neutral(&c, &m, &t, &params, 0, 3).unwrap();
        for (a, b) in recs.iter().zip(&neutral) {
            assert_eq!(a.prompt_ids, b.prompt_ids);
            assert_eq!(a.text, t.decode(&a.generated_ids).unwrap());
        }
        assert!(recs
            .iter()
            .zip(&neutral)
            .any(|(a, b)| a.generated_ids != b.generated_ids));
    }

    #[test]
    fn donor_prefix_identity() {
        let t = ByteTokenizer::new();
        let m = tiny();
        let c = Context::new(spec("x", "X\n\nX"), &t).unwrap();
        let prefix = &c.tokens()[..=c.boundary()];
        let donor = donor_snapshot(&m, c.tokens(), c.boundary(), &[Site::BlockOut]).unwrap();
        let p = SamplingParams::greedy(12);
        let patched = generate_with_transfer(&m, &donor, prefix, &p).unwrap();
        let plain = m.generate(prefix, &p, None).unwrap();
        assert_eq!(patched, plain);
    }

    #[test]
    fn original_record_round_trips() {
        let t = ByteTokenizer::new();
        let c = Context::new(spec("x", "one two\n\n three four"), &t).unwrap();
        let r = original_record(&c, &t, &SamplingParams::default()).unwrap();
        assert_eq!(r.text, " three four");
        assert_eq!(t.decode(&r.generated_ids).unwrap(), r.text);
        assert_eq!(r.prompt_ids.len(), c.boundary() + 1);
        let line = records_jsonl([&r]).unwrap();
        let back: GenerationRecord = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(back, r);
        assert!(line.contains(r#""kind":"original""#));
    }

    #[test]
    fn experiment_is_deterministic_and_complete() {
        let t = ByteTokenizer::new();
        let m = tiny();
        let ctxs: Vec<Context> = [
            ("b", "Cats sleep a lot.\n\nRain falls in spring."),
            ("a", "Trains run late.\n\nBread needs yeast."),
        ]
        .iter()
        .map(|(id, s)| Context::new(spec(id, s), &t).unwrap())
        .collect();
        let plan = ExperimentPlan {
            params: SamplingParams {
                max_new_tokens: 6,
                ..SamplingParams::default()
            },
            n_samples: 2,
            ..ExperimentPlan::default()
        };
        let r1 = run_experiment(&ctxs, &m, &t, &plan).unwrap();
        let r2 = run_experiment(&ctxs, &m, &t, &plan).unwrap();
        assert_eq!(
            r1.iter().map(|r| r.0.as_str()).collect::<Vec<_>>(),
            ["a", "b"]
        );
        for ((_, x), (_, y)) in r1.iter().zip(&r2) {
            let (x, y) = (x.as_ref().unwrap(), y.as_ref().unwrap());
            assert_eq!(x.records, y.records);
            assert_eq!(x.records.len(), 5);
            for (kind, recs) in &x.records {
                assert_eq!(
                    recs.len(),
                    if *kind == GenerationKind::Original {
                        1
                    } else {
                        2
                    }
                );
            }
        }
        let bad = ExperimentPlan {
            k_cheat: vec![0, 0],
            ..plan
        };
        assert!(run_experiment(&ctxs, &m, &t, &bad).is_err());
    }

    #[test]
    fn kind_names() {
        for k in GenerationKind::ALL {
            assert_eq!(k.as_str().parse::<GenerationKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
    }
}
