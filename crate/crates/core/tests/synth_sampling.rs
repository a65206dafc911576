use hoi_scope::cluster::{kmeans_cluster, majority_classes};
use hoi_scope::embed::{phate_embed, EmbedParams};
use hoi_scope::eval::Protocol;
use hoi_scope::ingest::standardize;
use hoi_scope::synth::{
    make_covariance_pair, run_ablation, sample_synthetic, shifted_mean, base_mean, AblationGrid, Method, SynthConfig,
    SynthKind,
};
use ndarray::{Array2, Axis};

fn population(values: &Array2<f64>, labels: &[usize], which: usize) -> Array2<f64> {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == which).collect();
    values.select(Axis(0), &rows)
}

#[test]
fn moments_match_generator() {
    let n = 10_000;
    for kind in [SynthKind::Disjoint, SynthKind::Nondisjoint] {
        let alpha = 0.7;
        let (data, labels) = sample_synthetic(&SynthConfig::new(kind, alpha, n, 21)).unwrap();
        let (s1, s2) = make_covariance_pair(kind, 0.8).unwrap();
        for (which, mu, sigma) in [(0, base_mean(), s1), (1, shifted_mean(alpha), s2)] {
            let x = population(&data.values, &labels, which);
            assert_eq!(x.nrows(), n);
            let mean = x.mean_axis(Axis(0)).unwrap();
            let bound = 5.0 / (n as f64).sqrt();
            for (a, b) in mean.iter().zip(mu.iter()) {
                assert!((a - b).abs() < bound, "{kind} pop {which}: mean {a} vs {b}");
            }
            let centered = &x - &mean;
            let cov = centered.t().dot(&centered) / (n - 1) as f64;
            let worst = (&cov - &sigma).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst < 0.05, "{kind} pop {which}: covariance off by {worst}");
        }
    }
}

#[test]
fn separated_populations_are_clustered() {
    let (data, labels) = sample_synthetic(&SynthConfig::new(SynthKind::Disjoint, 1.0, 1000, 4)).unwrap();
    let (z, _) = standardize(&data).unwrap();
    let params = EmbedParams {
        d: 2,
        ..EmbedParams::default()
    };
    let embedding = phate_embed(z.values.view(), &params).unwrap();
    let assignment = kmeans_cluster(&embedding, 2, 0, 300).unwrap();
    let majority = majority_classes(&assignment.labels, &labels, 2);
    let sizes = assignment.sizes();
    let purity = majority
        .iter()
        .zip(&sizes)
        .map(|((_, share), &size)| share * size as f64)
        .sum::<f64>()
        / labels.len() as f64;
    assert!(purity >= 0.99, "purity {purity}");
    assert_ne!(majority[0].0, majority[1].0);
}

#[test]
fn smoke_grid_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let grid = AblationGrid {
        kinds: vec![SynthKind::Disjoint],
        alphas: vec![0.0, 1.0],
        sizes: vec![200],
        m_values: vec![5],
        replicates: 2,
        ..AblationGrid::default()
    };
    let report = run_ablation(&grid, Some(dir.path()), 1).unwrap();
    // 2 alphas x 2 replicates x 2 methods x 1 m x 2 protocols
    assert_eq!(report.rows.len(), 16);
    for alpha in [0.0, 1.0] {
        for method in [Method::Linear, Method::LocalLinear] {
            for protocol in [Protocol::Group, Protocol::Topk] {
                let cells: Vec<_> = report
                    .rows
                    .iter()
                    .filter(|r| r.alpha == alpha && r.method == method && r.protocol == protocol)
                    .map(|r| r.replicate)
                    .collect();
                assert_eq!(cells, vec![0, 1]);
                let mean = report.mean(SynthKind::Disjoint, 200, alpha, method, protocol).unwrap();
                assert!((0.0..=1.0).contains(&mean.aucprc) && (0.0..=1.0).contains(&mean.cosine));
            }
        }
    }
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 8);

    let again = run_ablation(&grid, None, 1).unwrap();
    assert_eq!(again, report);
}
