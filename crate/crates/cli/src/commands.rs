use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use seampatch::analysis::{
    attention_boundary_heatmap, attention_output_cosine, heatmap_svg, layer_trend_summary,
    matrix_csv, trend_csv, LayerTrend,
};
use seampatch::eval::{
    distance_table, embed_records, projection_csv, summarize, summary_csv, summary_json,
    t_test_report, Embedder, ExternalEmbeddings, InternalEmbedder, KindSummary, TTestReport,
};
use seampatch::model::Model;
use seampatch::numerics::Tensor;
use seampatch::tap::save_snapshot;
use seampatch::tokenizer::Tokenizer;
use seampatch::transfer::{
    ingest_contexts, read_records, records_jsonl, run_experiment, Context, GenerationKind,
    GenerationRecord,
};

use crate::config::{EmbeddingConfig, RunConfig};
use crate::failure::{internal, user, Failure};

type Outcome = Result<(), Failure>;

fn write(path: &Path, contents: &str) -> Outcome {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| internal(anyhow!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| internal(anyhow!("cannot write {}: {e}", path.display())))?;
    info!(path = %path.display(), "wrote");
    Ok(())
}

/// Rejection line for `rejected.jsonl`.
#[derive(Serialize)]
struct Rejected<'a> {
    id: Option<&'a str>,
    line: Option<usize>,
    reason: String,
}

struct Loaded {
    tokenizer: Box<dyn Tokenizer>,
    model: Model,
}

fn load_engine(cfg: &RunConfig) -> Result<Loaded, Failure> {
    let tokenizer = cfg.build_tokenizer().map_err(user)?;
    let model = cfg.build_model(&*tokenizer).map_err(user)?;
    info!(
        hash = model.content_hash(),
        layers = model.config().n_layers,
        "model loaded"
    );
    Ok(Loaded { tokenizer, model })
}

/// Context id, input line and reason.
type Skipped = (Option<String>, Option<usize>, String);

/// Ingest contexts, dropping those the model cannot hold. Returns the
/// accepted contexts and one rejection entry per dropped line.
fn load_contexts(
    cfg: &RunConfig,
    engine: &Loaded,
) -> Result<(Vec<Context>, Vec<Skipped>), Failure> {
    let path = cfg.contexts_path().map_err(user)?;
    let ingested = ingest_contexts(path, &*engine.tokenizer).map_err(user)?;
    let mut rejected: Vec<_> = ingested
        .rejected
        .into_iter()
        .map(|r| (r.id, Some(r.line), r.reason))
        .collect();
    let max = engine.model.config().max_positions;
    let mut accepted = Vec::new();
    for c in ingested.accepted {
        if c.tokens().len() > max {
            rejected.push((
                Some(c.id().to_string()),
                None,
                format!(
                    "{} tokens exceed the model's {max} positions",
                    c.tokens().len()
                ),
            ));
        } else {
            accepted.push(c);
        }
    }
    for (id, line, reason) in &rejected {
        warn!(id = id.as_deref().unwrap_or("?"), line = line.unwrap_or(0), %reason, "context skipped");
    }
    if accepted.is_empty() {
        return Err(user(anyhow!("no usable contexts in {}", path.display())));
    }
    info!(
        accepted = accepted.len(),
        rejected = rejected.len(),
        "contexts ingested"
    );
    Ok((accepted, rejected))
}

fn max_value(t: &Tensor) -> f32 {
    t.data().iter().copied().fold(0.0, f32::max)
}

pub fn analyze(cfg: &RunConfig) -> Outcome {
    cfg.validate_common().map_err(user)?;
    cfg.contexts_path().map_err(user)?;
    cfg.validate_analysis().map_err(user)?;
    let engine = load_engine(cfg)?;
    let (contexts, _) = load_contexts(cfg, &engine)?;
    let segmented: Vec<_> = contexts
        .iter()
        .map(|c| c.segmented())
        .collect::<Result<_, _>>()
        .map_err(user)?;
    let dir = cfg.output_dir.join("analysis");
    let a = &cfg.analysis;

    let heat =
        attention_boundary_heatmap(&segmented, &engine.model, a.window).map_err(Failure::from)?;
    write(
        &dir.join("heatmap.csv"),
        &matrix_csv(&heat.matrix).map_err(Failure::from)?,
    )?;
    let title = format!(
        "attention around the boundary, ±{} tokens, {} contexts",
        a.window, heat.contexts
    );
    write(
        &dir.join("heatmap.svg"),
        &heatmap_svg(&heat.matrix, &title, 0.0, max_value(&heat.matrix)).map_err(Failure::from)?,
    )?;
    if a.per_layer {
        for (l, m) in heat.per_layer.iter().enumerate() {
            write(
                &dir.join(format!("heatmap_layer{l}.csv")),
                &matrix_csv(m).map_err(Failure::from)?,
            )?;
        }
    }

    let cos = attention_output_cosine(&segmented, &engine.model, &a.layers, a.span)
        .map_err(Failure::from)?;
    for (l, m) in cos.layers.iter().zip(&cos.matrices) {
        write(
            &dir.join(format!("cosine_layer{l}.csv")),
            &matrix_csv(m).map_err(Failure::from)?,
        )?;
        let title = format!("attention-output cosine, layer {l}, ±{} tokens", a.span);
        write(
            &dir.join(format!("cosine_layer{l}.svg")),
            &heatmap_svg(m, &title, -1.0, 1.0).map_err(Failure::from)?,
        )?;
    }
    let trend = layer_trend_summary(&cos).map_err(Failure::from)?;
    write(&dir.join("layer_trend.csv"), &trend_csv(&trend))?;
    Ok(())
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn transfer(cfg: &RunConfig) -> Outcome {
    cfg.validate_common().map_err(user)?;
    cfg.contexts_path().map_err(user)?;
    cfg.validate_transfer().map_err(user)?;
    let engine = load_engine(cfg)?;
    let (contexts, mut rejected) = load_contexts(cfg, &engine)?;
    let plan = cfg.transfer.plan(&*engine.tokenizer);

    let results = run_experiment(&contexts, &engine.model, &*engine.tokenizer, &plan)
        .map_err(Failure::from)?;
    let mut by_kind: BTreeMap<GenerationKind, Vec<GenerationRecord>> = BTreeMap::new();
    let gen_dir = cfg.output_dir.join("generations");
    let snap_dir = cfg.output_dir.join("snapshots");
    let mut succeeded = 0;
    for (id, outcome) in results {
        match outcome {
            Ok(o) => {
                succeeded += 1;
                if cfg.transfer.save_snapshots {
                    std::fs::create_dir_all(&snap_dir).map_err(internal)?;
                    let path = snap_dir.join(format!("{}.tarc", file_stem(&id)));
                    save_snapshot(&o.donor, &path).map_err(internal)?;
                }
                for (kind, recs) in o.records {
                    by_kind.entry(kind).or_default().extend(recs);
                }
            }
            Err(e) => {
                warn!(%id, error = %e, "context failed");
                rejected.push((Some(id), None, e.to_string()));
            }
        }
    }
    if succeeded == 0 {
        return Err(user(anyhow!("every context failed; see rejected.jsonl")));
    }
    for (kind, recs) in &by_kind {
        write(
            &gen_dir.join(format!("{kind}.jsonl")),
            &records_jsonl(recs).map_err(Failure::from)?,
        )?;
    }
    let mut lines = String::new();
    for (id, line, reason) in &rejected {
        let r = Rejected {
            id: id.as_deref(),
            line: *line,
            reason: reason.clone(),
        };
        lines.push_str(&serde_json::to_string(&r).map_err(internal)?);
        lines.push('\n');
    }
    write(&gen_dir.join("rejected.jsonl"), &lines)?;
    info!(succeeded, failed = rejected.len(), "transfer finished");
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TTestFile {
    #[serde(flatten)]
    report: Option<TTestReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn read_generations(dir: &Path) -> Result<Vec<GenerationRecord>, Failure> {
    let mut records = Vec::new();
    for kind in GenerationKind::ALL {
        let path = dir.join(format!("{kind}.jsonl"));
        if !path.is_file() {
            if matches!(kind, GenerationKind::Original | GenerationKind::Transferred) {
                return Err(user(anyhow!(
                    "generations file not found: {}",
                    path.display()
                )));
            }
            continue;
        }
        let recs = read_records(&path).map_err(user)?;
        if let Some(r) = recs.iter().find(|r| r.kind != kind) {
            return Err(user(anyhow!(
                "{} holds a {} record ({})",
                path.display(),
                r.kind,
                r.record_id
            )));
        }
        records.extend(recs);
    }
    Ok(records)
}

pub fn evaluate(cfg: &RunConfig) -> Outcome {
    cfg.validate_common().map_err(user)?;
    cfg.validate_evaluate().map_err(user)?;
    let records = read_generations(&cfg.generations_dir())?;
    let engine;
    let external;
    let embedder: &dyn Embedder = match &cfg.evaluate.embedding {
        EmbeddingConfig::Internal => {
            engine = load_engine(cfg)?;
            &InternalEmbedder::new(&engine.model, &*engine.tokenizer) as &dyn Embedder
        }
        EmbeddingConfig::External { archive } => {
            external = ExternalEmbeddings::load(archive).map_err(user)?;
            let missing = external.missing_ids(records.iter().map(|r| r.record_id.as_str()));
            if !missing.is_empty() {
                return Err(user(anyhow!(
                    "{} is missing embeddings for {} records: {}",
                    archive.display(),
                    missing.len(),
                    missing.join(", ")
                )));
            }
            &external
        }
    };
    info!(
        records = records.len(),
        embedder = embedder.name(),
        "embedding"
    );
    let embedded = embed_records(&records, embedder).map_err(Failure::from)?;
    let table = distance_table(&records, &embedded).map_err(Failure::from)?;
    let summary = summarize(&table).map_err(Failure::from)?;

    let dir = cfg.output_dir.join("evaluation");
    write(&dir.join("distances.csv"), &table.to_csv())?;
    write(&dir.join("summary.csv"), &summary_csv(&summary))?;
    write(
        &dir.join("summary.json"),
        &summary_json(&summary).map_err(Failure::from)?,
    )?;

    let [x, y] = cfg.evaluate.t_test;
    let ttest = match t_test_report(&table, x, y) {
        Ok(r) => TTestFile {
            report: Some(r),
            error: None,
        },
        Err(e) => {
            warn!(error = %e, "t-test not computed");
            TTestFile {
                report: None,
                error: Some(format!("{x} vs {y}: {e}")),
            }
        }
    };
    write(
        &dir.join("ttest.json"),
        &serde_json::to_string_pretty(&ttest).map_err(internal)?,
    )?;

    let projection = projection_csv(&records, &embedded).unwrap_or_else(|e| {
        warn!(error = %e, "projection not computed");
        "record_id,kind,x,y\n".to_string()
    });
    write(&dir.join("projection.csv"), &projection)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| user(anyhow!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| user(anyhow!("invalid {}: {e}", path.display())))
}

fn read_trend(path: &Path) -> Result<Vec<LayerTrend>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| user(anyhow!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || user(anyhow!("malformed line in {}: {l}", path.display()));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(LayerTrend {
                layer: f[0].parse().map_err(|_| bad())?,
                within_mean: f[1].parse().map_err(|_| bad())?,
                across_mean: f[2].parse().map_err(|_| bad())?,
                gap: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn render_report(
    summary: &[KindSummary],
    ttest: Option<&TTestFile>,
    trend: Option<&[LayerTrend]>,
) -> String {
    let mut s = String::from("# Paragraph-boundary transfer report\n\n## Mean cosine distance to the original paragraph (std)\n\n");
    let header: Vec<String> = summary.iter().map(|k| k.kind.to_string()).collect();
    let cells: Vec<String> = summary
        .iter()
        .map(|k| match k.std {
            Some(sd) => format!("{:.3} ({sd:.3})", k.mean),
            None => format!("{:.3} (n/a)", k.mean),
        })
        .collect();
    let counts: Vec<String> = summary.iter().map(|k| k.count.to_string()).collect();
    writeln!(s, "| | {} |", header.join(" | ")).unwrap();
    writeln!(s, "|---|{}", "---|".repeat(header.len())).unwrap();
    writeln!(s, "| distance | {} |", cells.join(" | ")).unwrap();
    writeln!(s, "| samples | {} |\n", counts.join(" | ")).unwrap();

    let mean = |k: GenerationKind| summary.iter().find(|s| s.kind == k).map(|s| s.mean);
    let chain = [
        GenerationKind::Transferred,
        GenerationKind::Neutral2,
        GenerationKind::Neutral1,
        GenerationKind::Neutral0,
    ];
    let present: Vec<(GenerationKind, f64)> = chain
        .iter()
        .filter_map(|&k| mean(k).map(|m| (k, m)))
        .collect();
    let violations: Vec<String> = present
        .windows(2)
        .filter(|w| w[0].1 > w[1].1)
        .map(|w| format!("{} > {}", w[0].0, w[1].0))
        .collect();
    let order: Vec<String> = present.iter().map(|(k, _)| k.to_string()).collect();
    if violations.is_empty() {
        writeln!(s, "Expected ordering {} holds.\n", order.join(" ≤ ")).unwrap();
    } else {
        writeln!(
            s,
            "Expected ordering {} is violated: {}.\n",
            order.join(" ≤ "),
            violations.join(", ")
        )
        .unwrap();
    }

    if let Some(t) = ttest {
        s.push_str("## Welch t-test\n\n");
        match (&t.report, &t.error) {
            (Some(r), _) => writeln!(
                s,
                "{} (n = {}, mean {:.3}) vs {} (n = {}, mean {:.3}): t = {:.3}, df = {:.1}, two-sided p = {:.3e}\n",
                r.x, r.n_x, r.mean_x, r.y, r.n_y, r.mean_y, r.t, r.df, r.p_two_sided
            )
            .unwrap(),
            (None, Some(e)) => writeln!(s, "Not computed: {e}\n").unwrap(),
            (None, None) => {}
        }
    }

    if let Some(trend) = trend {
        s.push_str("## Attention-output cosine by layer\n\n| layer | within | across | gap |\n|---|---|---|---|\n");
        for t in trend {
            writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:+.4} |",
                t.layer, t.within_mean, t.across_mean, t.gap
            )
            .unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn report(cfg: &RunConfig) -> Outcome {
    let eval_dir = cfg.output_dir.join("evaluation");
    let summary_path = eval_dir.join("summary.json");
    if !summary_path.is_file() {
        return Err(user(anyhow!(
            "{} not found; run `evaluate` first",
            summary_path.display()
        )));
    }
    let summary: Vec<KindSummary> = read_json(&summary_path)?;
    let ttest_path = eval_dir.join("ttest.json");
    let ttest: Option<TTestFile> = if ttest_path.is_file() {
        Some(read_json(&ttest_path)?)
    } else {
        None
    };
    let trend_path: PathBuf = cfg.output_dir.join("analysis/layer_trend.csv");
    let trend = if trend_path.is_file() {
        Some(read_trend(&trend_path)?)
    } else {
        None
    };
    write(
        &cfg.output_dir.join("report.md"),
        &render_report(&summary, ttest.as_ref(), trend.as_deref()),
    )
}
