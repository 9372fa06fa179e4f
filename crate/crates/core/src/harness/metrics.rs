//! Accuracy metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kll::KllSketch;

/// Quantile levels `0.01, 0.02, ..., 0.99`.
pub fn phi_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// Denominator floor for relative errors.
pub const REL_FLOOR: f64 = 1e-12;

pub fn rel_err(estimate: f64, truth: f64) -> f64 {
    (estimate - truth).abs() / truth.abs().max(REL_FLOOR)
}

/// Mean relative error; 0 for no pairs.
pub fn mre(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|&(e, t)| rel_err(e, t)).sum::<f64>() / pairs.len() as f64
}

/// Distance from `phi` to the CDF positions `x` can take in `sorted`.
///
/// A value repeated in the window covers the whole CDF step between
/// `#{< x}/n` and `#{<= x}/n`; any level inside that step is answered
/// correctly by `x`.
pub fn rank_error(sorted: &[f64], x: f64, phi: f64) -> f64 {
    let n = sorted.len() as f64;
    let lo = sorted.partition_point(|&v| v < x) as f64 / n;
    let hi = sorted.partition_point(|&v| v <= x) as f64 / n;
    if phi < lo {
        lo - phi
    } else if phi > hi {
        phi - hi
    } else {
        0.0
    }
}

/// Largest rank error over `(phi, estimate)` pairs against the sorted
/// window.
pub fn ks_error(estimates: &[(f64, f64)], sorted: &[f64]) -> Result<f64> {
    if sorted.is_empty() || estimates.is_empty() {
        return Err(Error::EmptyRange);
    }
    Ok(estimates
        .iter()
        .map(|&(phi, x)| rank_error(sorted, x, phi))
        .fold(0.0, f64::max))
}

/// Fraction of `truth` found in `found`.
pub fn recall<T: PartialEq>(found: &[T], truth: &[T]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    truth.iter().filter(|t| found.contains(t)).count() as f64 / truth.len() as f64
}

/// Worst normalized rank error of a standalone KLL sketch of width `k`
/// over `trials` random streams of `n` values, on the quantile grid.
pub fn calibrate_kll(k: u32, n: usize, trials: u32, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = phi_grid();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut sk = KllSketch::new(k, rng.random());
        let mut vals: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        for &v in &vals {
            sk.update(v);
        }
        vals.sort_unstable_by(f64::total_cmp);
        let est = sk.quantiles(&grid).expect("non-empty sketch");
        let pairs: Vec<(f64, f64)> = grid.iter().copied().zip(est).collect();
        worst = worst.max(ks_error(&pairs, &vals).expect("non-empty"));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mre_arithmetic() {
        assert_eq!(mre(&[(1.0, 1.0)]), 0.0);
        assert!((mre(&[(1.1, 1.0), (0.9, 1.0)]) - 0.1).abs() < 1e-12);
        assert_eq!(rel_err(1.0, 0.0), 1.0 / REL_FLOOR);
    }

    #[test]
    fn ks_of_exact_answers_is_small() {
        let mut v: Vec<f64> = (0..1_000).map(|i| (i % 37) as f64).collect();
        v.sort_unstable_by(f64::total_cmp);
        let grid = phi_grid();
        let pairs: Vec<(f64, f64)> = grid
            .iter()
            .map(|&p| (p, v[((p * v.len() as f64).ceil() as usize).max(1) - 1]))
            .collect();
        assert!(ks_error(&pairs, &v).unwrap() <= 1.0 / v.len() as f64);
        let flat = vec![3.0; 10];
        let pairs: Vec<(f64, f64)> = grid.iter().map(|&p| (p, 3.0)).collect();
        assert_eq!(ks_error(&pairs, &flat).unwrap(), 0.0);
        assert!(ks_error(&pairs, &[]).is_err());
    }

    #[test]
    fn recall_counts_overlap() {
        assert_eq!(recall(&[1, 2, 5], &[1, 2, 3, 4]), 0.5);
        assert_eq!(recall::<u8>(&[], &[]), 1.0);
    }

    #[test]
    fn calibration_is_small_for_wide_sketch() {
        let e = calibrate_kll(256, 50_000, 3, 1);
        assert!(e > 0.0 && e < 0.02, "{e}");
    }
}
