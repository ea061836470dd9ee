//! Brute-force recomputations used as oracles.

use dbvae::data::{Dataset, GroupTag};
use dbvae::Tensor;

/// Resampling weights recomputed from scratch: for every dimension, bin
/// edges from min/max, bin counts by direct enumeration of all examples,
/// then the per-example product of `1 / (Q + alpha)` and a final
/// normalization. Degenerate dimensions contribute nothing.
pub fn weights(mus: &Tensor, bins: usize, alpha: f64) -> Vec<f64> {
    let (m, k) = (mus.dim(0), mus.dim(1));
    let at = |i: usize, d: usize| mus.data()[i * k + d];
    let mut w = vec![1.0; m];
    for d in 0..k {
        let lo = (0..m).map(|i| at(i, d)).fold(f64::INFINITY, f64::min);
        let hi = (0..m).map(|i| at(i, d)).fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            continue;
        }
        let width = (hi - lo) / bins as f64;
        let bin = |v: f64| {
            let mut b = 0;
            while b + 1 < bins && v >= lo + (b + 1) as f64 * width {
                b += 1;
            }
            b
        };
        for i in 0..m {
            let mine = bin(at(i, d));
            let same = (0..m).filter(|&j| bin(at(j, d)) == mine).count();
            w[i] *= 1.0 / (same as f64 / m as f64 + alpha);
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Per-group `(n, correct)` and the negative row, counted one example at a
/// time.
pub fn group_counts(test: &Dataset, probs: &[f64], threshold: f64) -> ([(usize, usize); 4], (usize, usize)) {
    let mut groups = [(0, 0); 4];
    let mut negative = (0, 0);
    for (e, &p) in test.examples.iter().zip(probs) {
        let hit = (p >= threshold) == e.label;
        let slot = match e.group {
            Some(g) => &mut groups[GroupTag::ALL.iter().position(|&x| x == g).unwrap()],
            None => &mut negative,
        };
        slot.0 += 1;
        slot.1 += hit as usize;
    }
    (groups, negative)
}
