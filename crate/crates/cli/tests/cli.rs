//! End-to-end runs of the `seampatch` binary on a small seeded model with the
//! byte tokenizer.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seampatch::archive::Archive;
use seampatch::numerics::Tensor;
use seampatch::transfer::read_records;
use serde_json::json;
use tempfile::TempDir;

const CONTEXTS: &str = r#"{"id":"c1","text":"The river rose after three days of rain.\n\nMarkets in the city opened late on Monday."}
{"id":"c2","text":"Bees return to the hive at dusk.\n\nThe committee approved the new budget."}
{"id":"c3","text":"Snow covered the northern pass.\n\nHer violin lessons began in the spring."}
"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(contexts: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("contexts.jsonl"), contexts).unwrap();
        let ws = Self { dir };
        ws.write_config(json!({}));
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Base config with `extra` merged over the top level.
    fn write_config(&self, extra: serde_json::Value) {
        let mut cfg = json!({
            "model": {"seeded": {"config": {
                "n_layers": 2, "n_heads": 2, "d_model": 16, "d_ff": 32,
                "vocab_size": 257, "max_positions": 256
            }, "seed": 11}},
            "tokenizer": {"kind": "bytes"},
            "contexts": "contexts.jsonl",
            "output_dir": "out",
            "analysis": {"window": 3, "span": 4},
            "transfer": {"sampling": {"temperature": 0.7, "max_new_tokens": 10, "seed": 5}, "n_samples": 2}
        });
        for (k, v) in extra.as_object().unwrap() {
            cfg[k] = v.clone();
        }
        std::fs::write(
            self.path("config.json"),
            serde_json::to_string_pretty(&cfg).unwrap(),
        )
        .unwrap();
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_seampatch"))
            .args(args)
            .arg("--config")
            .arg(self.path("config.json"))
            .env("SEAMPATCH_LOG", "warn")
            .output()
            .unwrap()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn full_pipeline_writes_every_output() {
    let ws = Workspace::new(CONTEXTS);
    for cmd in ["analyze", "transfer", "evaluate", "report"] {
        let o = ws.run(&[cmd]);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
    }
    for f in [
        "analysis/heatmap.csv",
        "analysis/heatmap.svg",
        "analysis/cosine_layer0.csv",
        "analysis/cosine_layer1.csv",
        "analysis/layer_trend.csv",
        "generations/original.jsonl",
        "generations/transferred.jsonl",
        "generations/neutral0.jsonl",
        "generations/neutral1.jsonl",
        "generations/neutral2.jsonl",
        "snapshots/c1.tarc",
        "evaluation/distances.csv",
        "evaluation/summary.json",
        "evaluation/ttest.json",
        "evaluation/projection.csv",
        "report.md",
    ] {
        assert!(ws.path("out").join(f).is_file(), "missing {f}");
    }

    let heat = read(&ws.path("out/analysis/heatmap.csv"));
    assert_eq!(heat.lines().next().unwrap(), "offset,-3,-2,-1,0,1,2,3");
    assert_eq!(heat.lines().count(), 8);

    let summary = read(&ws.path("out/evaluation/summary.csv"));
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "kind,mean,std,count");
    let kinds: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(kinds, ["neutral0", "neutral1", "neutral2", "transferred"]);
    assert!(lines[1..].iter().all(|l| l.ends_with(",6")));

    let originals = read_records(ws.path("out/generations/original.jsonl")).unwrap();
    assert_eq!(originals.len(), 3);
    assert_eq!(
        originals[0].text,
        "Markets in the city opened late on Monday."
    );
    let transferred = read_records(ws.path("out/generations/transferred.jsonl")).unwrap();
    assert_eq!(transferred.len(), 6);
    assert!(transferred.iter().all(|r| r.generated_ids.len() <= 10));

    let ttest: serde_json::Value =
        serde_json::from_str(&read(&ws.path("out/evaluation/ttest.json"))).unwrap();
    assert_eq!(ttest["x"], "transferred");
    assert_eq!(ttest["y"], "neutral2");
    assert!(ttest["p_two_sided"].as_f64().unwrap() <= 1.0);

    let report = read(&ws.path("out/report.md"));
    assert!(report.contains("| distance |"));
    assert!(report.contains("Welch t-test"));
    assert!(report.contains("| 1 |"));
}

#[test]
fn transfer_is_deterministic_across_runs_and_worker_counts() {
    let ws = Workspace::new(CONTEXTS);
    let mut outputs = Vec::new();
    for workers in ["1", "3"] {
        let out = ws.path(&format!("out{workers}"));
        let o = ws.run(&[
            "transfer",
            "--workers",
            workers,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outputs.push(
            [
                "original",
                "transferred",
                "neutral0",
                "neutral1",
                "neutral2",
            ]
            .map(|k| std::fs::read(out.join(format!("generations/{k}.jsonl"))).unwrap()),
        );
        outputs.push([
            std::fs::read(out.join("snapshots/c2.tarc")).unwrap(),
            vec![],
            vec![],
            vec![],
            vec![],
        ]);
    }
    assert!(
        outputs[0] == outputs[2],
        "generations differ between worker counts"
    );
    assert!(
        outputs[1] == outputs[3],
        "snapshots differ between worker counts"
    );
}

#[test]
fn k_cheat_selection_controls_neutral_files() {
    let ws = Workspace::new(CONTEXTS);
    ws.write_config(json!({
        "transfer": {"sampling": {"temperature": 0.0, "max_new_tokens": 4}, "n_samples": 1, "k_cheat": [2], "save_snapshots": false}
    }));
    let o = ws.run(&["transfer"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(ws.path("out/generations/neutral2.jsonl").is_file());
    assert!(!ws.path("out/generations/neutral0.jsonl").exists());
    assert!(!ws.path("out/generations/neutral1.jsonl").exists());
    assert!(!ws.path("out/snapshots").exists());
    let n2 = read_records(ws.path("out/generations/neutral2.jsonl")).unwrap();
    // [bos] "\n\n" then the first two words of the second paragraph
    assert!(
        n2[0]
            .prompt_ids
            .ends_with(b" Markets in".map(u32::from).as_slice()),
        "{:?}",
        n2[0].prompt_ids
    );
}

#[test]
fn missing_contexts_file_is_a_user_error() {
    let ws = Workspace::new(CONTEXTS);
    ws.write_config(json!({"contexts": "nowhere.jsonl"}));
    for cmd in ["analyze", "transfer"] {
        let o = ws.run(&[cmd]);
        assert_eq!(code(&o), 2, "{cmd}");
        assert!(stderr(&o).contains("nowhere.jsonl"), "{}", stderr(&o));
    }
}

#[test]
fn malformed_config_reports_location() {
    let ws = Workspace::new(CONTEXTS);
    std::fs::write(ws.path("config.json"), "{\n  \"model\": {\"seeded\": ,\n}").unwrap();
    let o = ws.run(&["analyze"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2 column"), "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_rejected() {
    let ws = Workspace::new(CONTEXTS);
    ws.write_config(json!({"transfer": {"n_sample": 3}}));
    let o = ws.run(&["transfer"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_sample"), "{}", stderr(&o));
}

#[test]
fn invalid_contexts_are_skipped_and_logged() {
    let bad = format!(
        "{CONTEXTS}{{\"id\":\"no_break\",\"text\":\"one paragraph only\"}}\nnot json\n{{\"id\":\"c1\",\"text\":\"a\\n\\nb\"}}\n"
    );
    let ws = Workspace::new(&bad);
    let o = ws.run(&["transfer"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rejected = read(&ws.path("out/generations/rejected.jsonl"));
    assert_eq!(rejected.lines().count(), 3, "{rejected}");
    assert!(rejected.contains("no_break"));
    assert_eq!(
        read_records(ws.path("out/generations/original.jsonl"))
            .unwrap()
            .len(),
        3
    );
}

#[test]
fn only_invalid_contexts_is_a_user_error() {
    let ws = Workspace::new("{\"id\":\"x\",\"text\":\"no break here\"}\n");
    let o = ws.run(&["analyze"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn evaluate_without_transferred_generations_fails() {
    let ws = Workspace::new(CONTEXTS);
    assert_eq!(code(&ws.run(&["transfer"])), 0);
    std::fs::remove_file(ws.path("out/generations/transferred.jsonl")).unwrap();
    let o = ws.run(&["evaluate"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("transferred.jsonl"), "{}", stderr(&o));
}

#[test]
fn report_before_evaluate_fails() {
    let ws = Workspace::new(CONTEXTS);
    let o = ws.run(&["report"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("summary.json"));
}

fn embedding_archive(ids: &[String], dim: usize) -> Archive {
    let mut a = Archive::new();
    a.set_meta("embedder", json!("test-embedder"));
    a.set_meta("dim", json!(dim));
    for (i, id) in ids.iter().enumerate() {
        let v: Vec<f32> = (0..dim)
            .map(|j| ((i * 7 + j * 3) % 11) as f32 - 5.0)
            .collect();
        a.insert(id.clone(), Tensor::vector(v).unwrap());
    }
    a
}

fn all_record_ids(ws: &Workspace) -> Vec<String> {
    [
        "original",
        "transferred",
        "neutral0",
        "neutral1",
        "neutral2",
    ]
    .iter()
    .flat_map(|k| read_records(ws.path(&format!("out/generations/{k}.jsonl"))).unwrap())
    .map(|r| r.record_id)
    .collect()
}

#[test]
fn external_embeddings_complete_and_incomplete() {
    let ws = Workspace::new(CONTEXTS);
    assert_eq!(code(&ws.run(&["transfer"])), 0);
    let ids = all_record_ids(&ws);
    assert_eq!(ids.len(), 3 + 4 * 6);
    ws.write_config(
        json!({"evaluate": {"embedding": {"backend": "external", "archive": "emb.tarc"}}}),
    );

    embedding_archive(&ids, 8)
        .save(ws.path("emb.tarc"))
        .unwrap();
    let o = ws.run(&["evaluate"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        read(&ws.path("out/evaluation/distances.csv"))
            .lines()
            .count(),
        1 + 4 * 6
    );

    let dropped = ["c2/transferred/1".to_string(), "c3/original/0".to_string()];
    let kept: Vec<String> = ids
        .iter()
        .filter(|id| !dropped.contains(id))
        .cloned()
        .collect();
    assert_eq!(
        kept.len(),
        ids.len() - 2,
        "record ids changed format: {ids:?}"
    );
    embedding_archive(&kept, 8)
        .save(ws.path("emb.tarc"))
        .unwrap();
    let o = ws.run(&["evaluate"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(dropped.iter().all(|d| err.contains(d.as_str())), "{err}");
}
