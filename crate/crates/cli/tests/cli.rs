use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hoi-scope"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn hoi-scope")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_csv(dir: &Path) -> PathBuf {
    let csv = dir.join("data.csv");
    ok(&[
        "synth", "--alpha", "1", "--n", "60", "--kind", "disjoint", "--seed", "3", "--out", s(&csv),
        "--truth", s(&dir.join("truth.json")), "--labels-out", s(&dir.join("labels.txt")),
    ]);
    csv
}

fn write_config(dir: &Path, csv: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "input": {"format": "csv", "path": csv},
        "embed": {"d": 2, "knn": 5, "seed": 1},
        "cluster": {"k": 2, "seed": 1},
        "corex": {"m": 3, "seed": 1, "max_iter": 2000},
        "threads": 1,
        "min_cluster_size": 10
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// SHA-256 of every file under `dir` except the ones named in `skip`.
fn digests(dir: &Path, skip: &[&str]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            if skip.contains(&rel.as_str()) {
                continue;
            }
            let hash = Sha256::digest(fs::read(&path).unwrap());
            out.insert(rel, hash.iter().map(|b| format!("{b:02x}")).collect());
        }
    }
    out
}

#[test]
fn synth_writes_csv_truth_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth_csv(dir.path());
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 25);
    assert_eq!(lines.count(), 120);
    let labels = fs::read_to_string(dir.path().join("labels.txt")).unwrap();
    assert_eq!(labels.lines().filter(|l| *l == "0").count(), 60);
    assert_eq!(labels.lines().filter(|l| *l == "1").count(), 60);
    let truth: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["p"], 25);
    assert!(!truth["hois"].as_array().unwrap().is_empty());
}

#[test]
fn pipeline_is_reproducible_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth_csv(dir.path());
    let cfg = write_config(dir.path(), &csv);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["pipeline", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["pipeline", "--config", s(&cfg), "--out", s(&b)]);
    let skip = ["config.json", "timing.json"];
    let (da, db) = (digests(&a, &skip), digests(&b, &skip));
    assert!(da.contains_key("report.json") && da.contains_key("factors/cluster0.json"));
    assert_eq!(da, db);

    let timing: Value = serde_json::from_str(&fs::read_to_string(a.join("timing.json")).unwrap()).unwrap();
    let stages: Vec<&str> = timing["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    for stage in ["ingest", "embed", "cluster", "fit"] {
        assert!(stages.contains(&stage), "{stages:?}");
    }

    let out = ok(&["report", "--factors", s(&a.join("factors")), "--cluster", "0", "--top", "5"]);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    let factors = summary["factors"].as_array().unwrap();
    assert_eq!(factors.len(), 3);
    assert_eq!(factors[0]["features"].as_array().unwrap().len(), 25);

    let out = ok(&[
        "score", "--pred", s(&a.join("factors/cluster0.json")), "--truth", s(&dir.path().join("truth.json")),
        "--mode", "group",
    ]);
    let score: Value = serde_json::from_slice(&out.stdout).unwrap();
    let cos = score["cosine"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cos));
}

#[test]
fn staged_commands_and_figures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let csv = synth_csv(d);
    let emb = d.join("embedding.json");
    ok(&["embed", "--input", s(&csv), "--dims", "2", "--seed", "2", "--out", s(&emb)]);
    let clusters = d.join("clusters.json");
    ok(&["cluster", "--embedding", s(&emb), "--k", "2", "--out", s(&clusters)]);
    let factors = d.join("factors");
    ok(&[
        "fit", "--input", s(&csv), "--clusters", s(&clusters), "--factors", "2", "--max-iter", "1500", "--out",
        s(&factors),
    ]);
    assert!(factors.join("cluster1.json").exists());
    assert!(factors.join("models/cluster1.json").exists());

    let scatter = d.join("scatter.svg");
    ok(&["svg", "--kind", "scatter", "--embedding", s(&emb), "--clusters", s(&clusters), "--out", s(&scatter)]);
    assert_eq!(fs::read_to_string(&scatter).unwrap().matches("<circle").count(), 120);

    let by_feature = d.join("feature.svg");
    ok(&[
        "svg", "--kind", "scatter", "--embedding", s(&emb), "--feature", "x3", "--input", s(&csv), "--out",
        s(&by_feature),
    ]);
    assert!(fs::read_to_string(&by_feature).unwrap().contains("x3 = "));

    let heat = d.join("heat.svg");
    ok(&[
        "svg", "--kind", "mi_heatmap", "--factors", s(&factors.join("cluster0.json")), "--shape", "5x5", "--out",
        s(&heat),
    ]);
    assert!(fs::read_to_string(&heat).unwrap().starts_with("<svg"));

    let out = run(&[
        "svg", "--kind", "mi_heatmap", "--factors", s(&factors.join("cluster0.json")), "--shape", "4x5", "--out",
        s(&heat),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape mismatch"));

    let bar = d.join("tc.svg");
    ok(&["svg", "--kind", "tc_bar", "--factors", s(&factors.join("cluster1.json")), "--out", s(&bar)]);
    assert!(fs::read_to_string(&bar).unwrap().contains("factor"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let bad_cfg = d.join("bad.json");
    fs::write(&bad_cfg, r#"{"input": {"format": "csv", "path": "x.csv"}, "cluster": {"k": 0}}"#).unwrap();
    assert_eq!(run(&["pipeline", "--config", s(&bad_cfg)]).status.code(), Some(2));
    fs::write(&bad_cfg, "{ not json").unwrap();
    assert_eq!(run(&["pipeline", "--config", s(&bad_cfg)]).status.code(), Some(2));

    let missing = d.join("nope.csv");
    assert_eq!(
        run(&["embed", "--input", s(&missing), "--out", s(&d.join("e.json"))]).status.code(),
        Some(3)
    );

    let factors = d.join("factors");
    fs::create_dir_all(&factors).unwrap();
    let out = run(&["report", "--factors", s(&factors), "--cluster", "7"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown cluster id 7"));

    // Standardization drops both constant columns, leaving nothing to embed.
    let csv = d.join("flat.csv");
    fs::write(&csv, "a,b\n1,2\n1,2\n1,2\n1,2\n").unwrap();
    let out = run(&["embed", "--input", s(&csv), "--out", s(&d.join("e.json"))]);
    assert!(matches!(out.status.code(), Some(3) | Some(4)), "{:?}", out.status);

    let bad_kind = run(&["synth", "--alpha", "0.5", "--n", "5", "--kind", "weird", "--out", s(&d.join("x.csv"))]);
    assert_eq!(bad_kind.status.code(), Some(2));
}
