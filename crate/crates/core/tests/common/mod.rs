//! Independent reference implementations and small fixtures shared by the
//! integration tests.

#![allow(dead_code)]

pub mod grad_suite;

use msl::metrics::{PrfSuite, ScoredPredictions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// AP by counting, for each positive, how many items outrank it.
pub fn brute_ap(scores: &[f64], targets: &[u8]) -> Option<f64> {
    let outranks = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| targets[i] == 1).collect();
    if positives.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &positives {
        let above = (0..scores.len()).filter(|&j| outranks(j, i)).count();
        let pos_above = positives.iter().filter(|&&j| outranks(j, i)).count();
        total += (pos_above + 1) as f64 / (above + 1) as f64;
    }
    Some(total / positives.len() as f64)
}

pub fn brute_map(sp: &ScoredPredictions) -> Option<f64> {
    let (n, k) = (sp.num_items(), sp.num_classes());
    let aps: Vec<f64> = (0..k)
        .filter_map(|c| {
            let s: Vec<f64> = (0..n).map(|i| sp.scores()[i * k + c]).collect();
            let t: Vec<u8> = (0..n).map(|i| sp.targets()[i * k + c]).collect();
            brute_ap(&s, &t)
        })
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// CP/CR/CF1/OP/OR/OF1 from a direct walk over the score matrix.
pub fn brute_prf(sp: &ScoredPredictions, threshold: f64) -> PrfSuite {
    let (n, k) = (sp.num_items(), sp.num_classes());
    let (mut p_sum, mut p_n, mut r_sum, mut r_n) = (0.0, 0usize, 0.0, 0usize);
    let (mut all_tp, mut all_pred, mut all_pos) = (0usize, 0usize, 0usize);
    for c in 0..k {
        let pred: Vec<bool> = (0..n).map(|i| sp.scores()[i * k + c] >= threshold).collect();
        let pos: Vec<bool> = (0..n).map(|i| sp.targets()[i * k + c] == 1).collect();
        let tp = (0..n).filter(|&i| pred[i] && pos[i]).count();
        let npred = pred.iter().filter(|&&b| b).count();
        let npos = pos.iter().filter(|&&b| b).count();
        if npred > 0 {
            p_sum += tp as f64 / npred as f64;
            p_n += 1;
        }
        if npos > 0 {
            r_sum += tp as f64 / npos as f64;
            r_n += 1;
        }
        all_tp += tp;
        all_pred += npred;
        all_pos += npos;
    }
    let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
    let harmonic = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let (cp, cr) = (ratio(p_sum, p_n), ratio(r_sum, r_n));
    let (op, or_) = (ratio(all_tp as f64, all_pred), ratio(all_tp as f64, all_pos));
    PrfSuite {
        cp,
        cr,
        cf1: harmonic(cp, cr),
        op,
        or_,
        of1: harmonic(op, or_),
    }
}

/// Random instance with N ≤ 50, K ≤ 8; scores on a coarse grid so ties occur.
pub fn random_instance(seed: u64) -> ScoredPredictions {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=50);
    let k = rng.gen_range(1..=8);
    let coarse = rng.gen_bool(0.5);
    let scores = (0..n * k)
        .map(|_| {
            if coarse {
                rng.gen_range(0..=10) as f64 / 10.0
            } else {
                rng.gen::<f64>()
            }
        })
        .collect();
    let rate = rng.gen_range(0.05..0.6);
    let targets = (0..n * k).map(|_| rng.gen_bool(rate) as u8).collect();
    ScoredPredictions::new(n, k, scores, targets).unwrap()
}

pub fn prf_values(p: &PrfSuite) -> [f64; 6] {
    [p.cp, p.cr, p.cf1, p.op, p.or_, p.of1]
}
