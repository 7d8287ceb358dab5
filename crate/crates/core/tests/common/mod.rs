#![allow(dead_code)]

use mmoe_core::metrics::ScoreSet;
use mmoe_core::moe::{ExpertActivation, MoeLayerParams};
use mmoe_core::tensor::Tensor;
use mmoe_core::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-bound..bound)).collect()
}

pub fn tensor(r: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::new(shape, uniform(r, shape.iter().product(), bound)).unwrap()
}

pub fn param(r: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::parameter(shape, uniform(r, shape.iter().product(), bound)).unwrap()
}

pub fn moe_params(r: &mut impl Rng, d: usize, e: usize, s: usize, h: usize) -> MoeLayerParams {
    MoeLayerParams::new(
        param(r, &[d, e * s], 1.0),
        param(r, &[e, d, h], 1.0),
        param(r, &[e, h], 0.5),
        param(r, &[e, h, d], 1.0),
        param(r, &[e, d], 0.5),
        s,
        ExpertActivation::Gelu,
    )
    .unwrap()
}

/// Random score set with both classes present; scores drawn from a small
/// grid when `ties` so that equal scores are common.
pub fn score_set(r: &mut impl Rng, n: usize, ties: bool) -> ScoreSet {
    loop {
        let scores: Vec<f64> = (0..n)
            .map(|_| if ties { r.random_range(0..12) as f64 / 11.0 } else { r.random::<f64>() })
            .collect();
        let labels: Vec<Label> = (0..n).map(|_| if r.random::<bool>() { Label::Real } else { Label::Fake }).collect();
        if labels.contains(&Label::Real) && labels.contains(&Label::Fake) {
            return ScoreSet::new(scores, labels).unwrap();
        }
    }
}

/// AUC by counting (real, fake) pairs: a real above a fake scores 1, a tie 1/2.
pub fn pair_count_auc(set: &ScoreSet) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (&sr, _) in set.scores().iter().zip(set.labels()).filter(|(_, &l)| l == Label::Real) {
        for (&sf, _) in set.scores().iter().zip(set.labels()).filter(|(_, &l)| l == Label::Fake) {
            pairs += 1.0;
            if sr > sf {
                wins += 1.0;
            } else if sr == sf {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// EER by brute force: every observed score and `+inf` as a threshold,
/// error rates counted directly, smallest |FAR − FRR| with ties to the lower
/// threshold, reported as the mean of the two rates. Gaps are compared as
/// exact rationals by cross-multiplying the counts.
pub fn sweep_eer(set: &ScoreSet) -> (f64, f64) {
    let mut cands: Vec<f64> = set.scores().to_vec();
    cands.push(f64::INFINITY);
    let real: Vec<f64> = set.scores().iter().zip(set.labels()).filter(|(_, &l)| l == Label::Real).map(|(&s, _)| s).collect();
    let fake: Vec<f64> = set.scores().iter().zip(set.labels()).filter(|(_, &l)| l == Label::Fake).map(|(&s, _)| s).collect();
    let mut best: Option<(i64, f64, f64)> = None;
    for &t in &cands {
        let fa = fake.iter().filter(|&&s| s >= t).count() as i64;
        let fr = real.iter().filter(|&&s| s < t).count() as i64;
        let gap = (fa * real.len() as i64 - fr * fake.len() as i64).abs();
        let (far, frr) = (fa as f64 / fake.len() as f64, fr as f64 / real.len() as f64);
        let better = match best {
            None => true,
            Some((g, _, bt)) => gap < g || (gap == g && t < bt),
        };
        if better {
            best = Some((gap, (far + frr) / 2.0, t));
        }
    }
    let (_, rate, t) = best.unwrap();
    (rate, t)
}
