use hoi_scope::eval::{auc_prc, cosine_distance, group_score, topk_score, GroundTruthHoi};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(max_p: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2..=max_p).prop_flat_map(|p| {
        (
            prop::collection::vec((0u32..64).prop_map(|v| v as f64 / 8.0), p),
            prop::collection::vec(any::<bool>(), p),
        )
            .prop_filter("needs a positive and a nonzero score", |(s, g)| {
                g.iter().any(|&b| b) && s.iter().any(|&v| v > 0.0)
            })
    })
}

proptest! {
    #[test]
    fn cosine_scale_invariant((scores, members) in instance(16), exp in -20i32..20) {
        let g = GroundTruthHoi { members };
        let c = 2f64.powi(exp);
        let scaled: Vec<f64> = scores.iter().map(|v| v * c).collect();
        prop_assert_eq!(cosine_distance(&scaled, &g).unwrap(), cosine_distance(&scores, &g).unwrap());
    }

    #[test]
    fn cosine_in_unit_interval((scores, members) in instance(16)) {
        let d = cosine_distance(&scores, &GroundTruthHoi { members }).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn ap_invariant_under_monotone_maps((scores, members) in instance(24)) {
        let g = GroundTruthHoi { members };
        let base = auc_prc(&scores, &g).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|v| v * v * v + v).collect();
        let logged: Vec<f64> = scores.iter().map(|v| (1.0 + v).ln()).collect();
        prop_assert_eq!(auc_prc(&cubed, &g).unwrap(), base);
        prop_assert_eq!(auc_prc(&logged, &g).unwrap(), base);
    }

    #[test]
    fn ap_bounds((scores, members) in instance(24)) {
        let g = GroundTruthHoi { members };
        let ap = auc_prc(&scores, &g).unwrap();
        let npos = g.members.iter().filter(|&&b| b).count() as f64;
        let prevalence = npos / g.members.len() as f64;
        // worst case puts every positive last
        let floor: f64 = (0..npos as usize)
            .map(|j| (j + 1) as f64 / (g.members.len() - npos as usize + j + 1) as f64)
            .sum::<f64>() / npos;
        prop_assert!(ap <= 1.0 + 1e-15 && ap >= floor - 1e-12 && floor <= prevalence + 1e-12);
    }

    #[test]
    fn group_and_topk_bounded(
        preds in prop::collection::vec(prop::collection::vec((1u32..16).prop_map(f64::from), 8), 1..5),
        truths in prop::collection::vec(prop::collection::vec(any::<bool>(), 8), 1..5),
    ) {
        let truths: Vec<GroundTruthHoi> = truths
            .into_iter()
            .filter(|m| m.iter().any(|&b| b))
            .map(|members| GroundTruthHoi { members })
            .collect();
        prop_assume!(!truths.is_empty());
        let g = group_score(&preds, &truths).unwrap();
        let (t, k) = topk_score(&preds, &truths).unwrap();
        prop_assert_eq!(k, preds.len().min(truths.len()));
        for v in [g.cosine, g.aucprc, t.cosine, t.aucprc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn random_scores_average_to_prevalence() {
    let p = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for npos in [10, 40, 100] {
        let g = GroundTruthHoi::from_indices(p, &(0..npos).collect::<Vec<_>>()).unwrap();
        let draws = 1000;
        let mean = (0..draws)
            .map(|_| {
                let s: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
                auc_prc(&s, &g).unwrap()
            })
            .sum::<f64>()
            / draws as f64;
        let prevalence = npos as f64 / p as f64;
        assert!((mean - prevalence).abs() < 0.05, "npos {npos}: mean AP {mean} vs {prevalence}");
    }
}
