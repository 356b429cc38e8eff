//! Rank metrics against brute-force oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relikin_core::reliability::{pr_auc, risk_coverage, roc_auc, spearman, Statistic};

mod oracles;

fn instance(rng: &mut ChaCha8Rng, tied: bool) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(3..=64);
    let draw = |rng: &mut ChaCha8Rng| {
        if tied {
            rng.gen_range(0..5) as f64
        } else {
            rng.gen::<f64>()
        }
    };
    let e: Vec<f64> = (0..n).map(|_| draw(rng)).collect();
    let u: Vec<f64> = (0..n).map(|_| draw(rng)).collect();
    let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
    (e, u, labels)
}

fn agree(got: Statistic, want: Option<f64>) {
    match (got, want) {
        (Statistic::Value(g), Some(w)) => assert!((g - w).abs() < 1e-9, "{g} vs {w}"),
        (Statistic::Degenerate, None) => {}
        other => panic!("mismatch {other:?}"),
    }
}

#[test]
fn thousand_random_instances_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..1000 {
        let (e, u, labels) = instance(&mut rng, i % 2 == 1);
        agree(
            spearman(&e, &u).unwrap(),
            oracles::pearson(&oracles::ranks(&e), &oracles::ranks(&u)),
        );
        agree(roc_auc(&u, &labels).unwrap(), oracles::roc(&u, &labels));
        agree(pr_auc(&u, &labels).unwrap(), oracles::pr(&u, &labels));
    }
}

#[test]
fn uninformative_scores_give_half_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    let auc = roc_auc(&scores, &labels).unwrap().value().unwrap();
    assert!((auc - 0.5).abs() < 0.02, "{auc}");
}

fn distinct(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(-1000i32..1000, n).prop_map(|s| s.into_iter().map(|v| v as f64 / 100.0).collect())
}

proptest! {
    #[test]
    fn spearman_ignores_monotone_transforms(e in distinct(20), u in distinct(20).prop_shuffle()) {
        let base = spearman(&e, &u).unwrap();
        let exp_u: Vec<f64> = u.iter().map(|x| x.exp()).collect();
        let cubed_e: Vec<f64> = e.iter().map(|x| x * x * x + 2.0 * x).collect();
        prop_assert_eq!(spearman(&e, &exp_u).unwrap(), base);
        prop_assert_eq!(spearman(&cubed_e, &u).unwrap(), base);
    }

    #[test]
    fn flipping_scores_complements_auc(u in distinct(30).prop_shuffle(), labels in prop::collection::vec(any::<bool>(), 30)) {
        let flipped: Vec<f64> = u.iter().map(|x| -x).collect();
        match (roc_auc(&u, &labels).unwrap(), roc_auc(&flipped, &labels).unwrap()) {
            (Statistic::Value(a), Statistic::Value(b)) => prop_assert!((a + b - 1.0).abs() < 1e-12),
            (a, b) => prop_assert!(a == Statistic::Degenerate && b == Statistic::Degenerate),
        }
    }

    #[test]
    fn risk_is_rank_based(e in prop::collection::vec(0.0..100.0f64, 1..60), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = e.iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
        let grid = [0.05, 0.1, 0.3, 0.5, 0.9, 1.0];
        let base = risk_coverage(&e, &u, &grid).unwrap();
        let exp_u: Vec<f64> = u.iter().map(|x| x.exp()).collect();
        let affine_u: Vec<f64> = u.iter().map(|x| 2.0 * x + 1.0).collect();
        prop_assert_eq!(&risk_coverage(&e, &exp_u, &grid).unwrap(), &base);
        prop_assert_eq!(&risk_coverage(&e, &affine_u, &grid).unwrap(), &base);
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        prop_assert_eq!(base.last().unwrap().risk_mm, mean);
    }
}

#[test]
fn tied_scores_keep_frame_order() {
    let e = [5.0, 1.0, 9.0, 3.0];
    let curve = risk_coverage(&e, &[0.0; 4], &[0.25, 0.5, 1.0]).unwrap();
    assert_eq!(curve[0].risk_mm, 5.0);
    assert_eq!(curve[1].risk_mm, 3.0);
    assert_eq!(curve[2].risk_mm, 4.5);
}
