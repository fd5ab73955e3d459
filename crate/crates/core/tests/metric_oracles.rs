mod common;

use common::{ap_oracle, auroc_oracle, fpr95_oracle};
use oe_tune::metrics::{aggregate, aupr, aupr_out, auroc, curve_points, fpr95, ScoreSet, Summary};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Score sets of total size ≤ 200; every third set draws from a handful of
/// values so ties dominate.
fn random_set(seed: u64) -> ScoreSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_id = rng.random_range(1..=120);
    let n_ood = rng.random_range(1..=200 - n_id);
    let levels = rng.random_range(1..6);
    let tie_heavy = seed % 3 == 0;
    let mut draw = |shift: f64| -> f64 {
        if tie_heavy {
            rng.random_range(0..levels) as f64 * 0.25
        } else {
            rng.random::<f64>() + shift
        }
    };
    let id = (0..n_id).map(|_| draw(0.3)).collect();
    let ood = (0..n_ood).map(|_| draw(0.0)).collect();
    ScoreSet::new(id, ood).unwrap()
}

#[test]
fn metrics_match_brute_force_oracles() {
    for seed in 0..200 {
        let s = random_set(seed);
        let (id, ood) = (&s.id_scores, &s.ood_scores);
        assert!((auroc(&s).unwrap() - auroc_oracle(id, ood)).abs() <= 1e-12, "auroc, seed {seed}");
        assert!((fpr95(&s).unwrap() - fpr95_oracle(id, ood)).abs() <= 1e-12, "fpr95, seed {seed}");
        assert!((aupr(&s).unwrap() - ap_oracle(id, ood)).abs() <= 1e-12, "aupr, seed {seed}");
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let out = ap_oracle(&neg(ood), &neg(id));
        assert!((aupr_out(&s).unwrap() - out).abs() <= 1e-12, "aupr_out, seed {seed}");
    }
}

#[test]
fn small_hand_examples() {
    let s = ScoreSet::new(vec![0.9, 0.8], vec![0.1, 0.2]).unwrap();
    assert_eq!(auroc(&s).unwrap(), 1.0);
    assert_eq!(fpr95(&s).unwrap(), 0.0);
    let tied = ScoreSet::new(vec![0.5; 4], vec![0.5; 3]).unwrap();
    assert_eq!(auroc(&tied).unwrap(), 0.5);
    assert_eq!(fpr95(&tied).unwrap(), 1.0);
}

#[test]
fn curve_ends_at_the_full_sets() {
    for seed in 0..50 {
        let s = random_set(seed);
        let pts = curve_points(&s).unwrap();
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!(pts.windows(2).all(|w| w[0].threshold > w[1].threshold && w[0].fpr <= w[1].fpr));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auroc_under_role_swap(id in vec(0u8..6, 1..30), ood in vec(0u8..6, 1..30)) {
        let f = |v: &[u8]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let s = ScoreSet::new(f(&id), f(&ood)).unwrap();
        let a = auroc(&s).unwrap();
        // negated roles rank identically; plain swapped roles complement
        prop_assert!((auroc(&s.flipped()).unwrap() - a).abs() <= 1e-12);
        let swapped = ScoreSet::new(s.ood_scores.clone(), s.id_scores.clone()).unwrap();
        prop_assert!((a + auroc(&swapped).unwrap() - 1.0).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&fpr95(&s).unwrap()));
        prop_assert!((0.0..=1.0).contains(&aupr(&s).unwrap()));
    }

    #[test]
    fn monotone_rescaling_changes_nothing(id in vec(-5.0..5.0f64, 1..40), ood in vec(-5.0..5.0f64, 1..40)) {
        let s = ScoreSet::new(id.clone(), ood.clone()).unwrap();
        let g = |v: &[f64]| v.iter().map(|x| 3.0 * x + 1.0).collect::<Vec<_>>();
        let t = ScoreSet::new(g(&id), g(&ood)).unwrap();
        prop_assert_eq!(auroc(&s).unwrap(), auroc(&t).unwrap());
        prop_assert_eq!(fpr95(&s).unwrap(), fpr95(&t).unwrap());
    }
}

#[test]
fn aggregate_uses_sample_std() {
    let mk = |v: f64| Summary {
        acc: v,
        fpr95: v,
        auroc: v,
        aupr: v,
    };
    let a = aggregate(&[mk(1.0), mk(2.0), mk(3.0)]).unwrap();
    assert_eq!(a.mean.acc, 2.0);
    assert_eq!(a.std.auroc, 1.0);
    assert_eq!(aggregate(&[mk(0.5)]).unwrap().std.acc, 0.0);
}
