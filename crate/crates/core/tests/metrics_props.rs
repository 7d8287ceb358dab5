mod common;

use common::{pair_count_auc, rng, score_set, sweep_eer};
use mmoe_core::metrics::{acer, auc, eer, roc, ScoreSet};
use mmoe_core::Label;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn auc_and_eer_match_oracles_on_random_sets() {
    let mut r = rng(7);
    for i in 0..1000 {
        let n = r.random_range(2..=200);
        let set = score_set(&mut r, n, i % 2 == 0);
        let a = auc(&roc(&set).unwrap());
        assert!((a - pair_count_auc(&set)).abs() < 1e-12, "set {i}: {a}");
        let e = eer(&set).unwrap();
        let (rate, t) = sweep_eer(&set);
        assert!((e.rate - rate).abs() < 1e-12, "set {i}: {} vs {rate}", e.rate);
        assert_eq!(e.threshold, t, "set {i}");
    }
}

fn flipped(set: &ScoreSet) -> ScoreSet {
    let labels = set.labels().iter().map(|&l| if l == Label::Real { Label::Fake } else { Label::Real }).collect();
    ScoreSet::new(set.scores().iter().map(|s| 1.0 - s).collect(), labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_and_eer_survive_monotone_transforms(n in 2usize..80, ties in any::<bool>(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let set = score_set(&mut r, n, ties);
        let squashed = ScoreSet::new(set.scores().iter().map(|s| s.powi(3) * 0.5 + 0.1).collect(), set.labels().to_vec()).unwrap();
        prop_assert!((auc(&roc(&set).unwrap()) - auc(&roc(&squashed).unwrap())).abs() < 1e-12);
        prop_assert!((eer(&set).unwrap().rate - eer(&squashed).unwrap().rate).abs() < 1e-12);
    }

    #[test]
    fn auc_is_symmetric_under_label_swap(n in 2usize..80, ties in any::<bool>(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let set = score_set(&mut r, n, ties);
        let f = flipped(&set);
        prop_assert!((auc(&roc(&set).unwrap()) - auc(&roc(&f).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn acer_bounds_and_extremes(n in 2usize..80, t in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let set = score_set(&mut r, n, false);
        let a = acer(&set, t).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.acer));
        prop_assert!((a.acer - (a.apcer + a.bpcer) / 2.0).abs() < 1e-15);
        let all_real = acer(&set, 0.0).unwrap();
        prop_assert_eq!((all_real.apcer, all_real.bpcer), (1.0, 0.0));
    }
}

/// With distinct scores and a unique minimizer of |FAR − FRR|, swapping the
/// roles of the classes (and reflecting scores) leaves the EER unchanged.
#[test]
fn eer_is_symmetric_when_minimizer_is_unique() {
    let mut r = rng(11);
    let mut checked = 0;
    for _ in 0..2000 {
        let n = r.random_range(4..60);
        let set = score_set(&mut r, n, false);
        let real = set.n_real() as f64;
        let fake = set.n_fake() as f64;
        let mut pts: Vec<f64> = roc(&set).unwrap().iter().map(|p| (p.far - (1.0 - p.tpr)).abs()).collect();
        pts.sort_by(f64::total_cmp);
        if pts.len() > 1 && pts[1] - pts[0] < 0.5 / (real * fake) {
            continue;
        }
        checked += 1;
        let a = eer(&set).unwrap().rate;
        let b = eer(&flipped(&set)).unwrap().rate;
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert!(checked > 200, "only {checked} sets had a unique minimizer");
}
