use std::fs;
use std::path::Path;

use hoi_scope::corex::FactorReport;
use hoi_scope::pipeline::{self, load_factor_dir, InputSpec, RunConfig, RunReport, Timing};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Three classes of 4x4 "images", each lighting up its own set of pixels with a shared intensity.
fn write_idx(dir: &Path, per_class: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 3 * per_class;
    let mut pixels = Vec::with_capacity(n * 16);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 3;
        let level: f64 = rng.random_range(0.3..1.0);
        for px in 0..16 {
            let on = px % 3 == class;
            let v = if on { 200.0 * level } else { 40.0 } + rng.random_range(0.0..30.0);
            pixels.push(v.round() as u8);
        }
        labels.push(class as u8);
    }
    let mut images = Vec::new();
    for v in [0x0803u32, n as u32, 4, 4] {
        images.extend(v.to_be_bytes());
    }
    images.extend(pixels);
    let mut lab = Vec::new();
    lab.extend(0x0801u32.to_be_bytes());
    lab.extend((n as u32).to_be_bytes());
    lab.extend(labels);
    let (ip, lp) = (dir.join("images.idx"), dir.join("labels.idx"));
    fs::write(&ip, images).unwrap();
    fs::write(&lp, lab).unwrap();
    (ip, lp)
}

#[test]
fn idx_run_writes_consistent_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (images, labels) = write_idx(tmp.path(), 60);
    let mut cfg = RunConfig::new(InputSpec::Idx { images, labels }, tmp.path().join("out"));
    cfg.embed.d = 2;
    cfg.cluster.k = 3;
    cfg.corex.m = 2;
    cfg.min_cluster_size = 10;
    let report = pipeline::run_pipeline(&cfg).unwrap();

    let out = &cfg.out_dir;
    for name in ["config.json", "embedding.json", "clusters.json", "report.json", "timing.json"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    assert_eq!(report.input.rows, 180);
    assert_eq!(report.input.cols, 16);

    // clusters in the report are exactly those in the assignment
    let clusters: Vec<usize> = report.factors.iter().map(|f| f.cluster).collect();
    assert_eq!(clusters, (0..report.assignment.k).collect::<Vec<_>>());
    assert_eq!(report.cluster_sizes.iter().sum::<usize>(), 180);

    let majority = report.majority.as_ref().unwrap();
    let mut classes: Vec<usize> = majority.iter().map(|m| m.class).collect();
    classes.sort();
    assert_eq!(classes, vec![0, 1, 2]);
    assert!(majority.iter().all(|m| m.share > 0.9), "{majority:?}");

    let on_disk: RunReport = pipeline::read_json(out.join("report.json")).unwrap();
    assert_eq!(on_disk.factors, report.factors);
    let factors: Vec<FactorReport> = load_factor_dir(out.join("factors")).unwrap();
    assert_eq!(factors, report.factors);
    for f in &factors {
        assert_eq!(f.mi.ncols(), 16);
        assert!(f.mi.iter().all(|&v| v >= 0.0));
        assert!(f.tc[f.order[0]] >= f.tc[f.order[1]]);
    }
    assert!(report.factor_report(7).is_err());

    let timing: Timing = pipeline::read_json(out.join("timing.json")).unwrap();
    let stages: Vec<&str> = timing.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(stages, ["ingest", "standardize", "embed", "cluster", "fit", "write"]);
    let sum: f64 = timing.stages.iter().map(|s| s.seconds).sum();
    assert!(timing.total_seconds + 1e-9 >= sum);

    let summary = pipeline::emit_report(&report, 1, 1).unwrap();
    assert_eq!(summary.factors.len(), 1);
    assert_eq!(summary.factors[0].rank, 0);
}

#[test]
fn missing_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::new(
        InputSpec::from_path(tmp.path().join("absent.csv")),
        tmp.path().join("out"),
    );
    let err = pipeline::run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.kind(), hoi_scope::ErrorKind::Data);
    assert!(err.to_string().starts_with("ingest"));
}
