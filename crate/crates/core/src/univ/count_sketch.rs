use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::hash::hash_u64;

/// Signed-counter frequency sketch: `rows` independent hash rows of `cols`
/// counters; an item's estimate is the median of its signed counters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountSketch {
    rows: u32,
    cols: u32,
    counters: Vec<i64>,
    /// (bucket seed, sign seed) per row.
    seeds: Vec<(u64, u64)>,
}

impl CountSketch {
    pub fn new(rows: u32, cols: u32, seed: u64) -> Self {
        assert!(rows > 0 && cols.is_power_of_two());
        let seeds = (0..rows as u64)
            .map(|r| (hash_u64(2 * r, seed), hash_u64(2 * r + 1, seed)))
            .collect();
        Self {
            rows,
            cols,
            counters: vec![0; (rows * cols) as usize],
            seeds,
        }
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn counters(&self) -> &[i64] {
        &self.counters
    }

    /// `q`-quantile of the absolute counter values.
    pub fn abs_counter_quantile(&self, q: f64) -> f64 {
        let mut v: Vec<i64> = self.counters.iter().map(|c| c.abs()).collect();
        let idx = ((v.len() as f64 * q) as usize).min(v.len() - 1);
        *v.select_nth_unstable(idx).1 as f64
    }

    pub fn is_zero(&self) -> bool {
        self.counters.iter().all(|&c| c == 0)
    }

    #[inline]
    fn slot(&self, row: usize, token: u64) -> (usize, i64) {
        let (bs, ss) = self.seeds[row];
        let col = (hash_u64(token, bs) & (self.cols as u64 - 1)) as usize;
        let sign = if hash_u64(token, ss) >> 63 == 0 { 1 } else { -1 };
        (row * self.cols as usize + col, sign)
    }

    #[inline]
    pub fn update(&mut self, token: u64, weight: i64) {
        for r in 0..self.rows as usize {
            let (i, s) = self.slot(r, token);
            self.counters[i] += s * weight;
        }
    }

    pub fn estimate(&self, token: u64) -> f64 {
        let mut vals = [0i64; 16];
        if self.rows as usize <= vals.len() {
            let n = self.rows as usize;
            for (r, v) in vals.iter_mut().enumerate().take(n) {
                let (i, s) = self.slot(r, token);
                *v = s * self.counters[i];
            }
            median(&mut vals[..n])
        } else {
            let mut v: Vec<i64> = (0..self.rows as usize)
                .map(|r| {
                    let (i, s) = self.slot(r, token);
                    s * self.counters[i]
                })
                .collect();
            median(&mut v)
        }
    }

    /// Median over rows of the row-wise inner product; estimates
    /// `<f_self, f_other>` (and `F2` when `other` is `self`).
    pub fn inner_product(&self, other: &CountSketch) -> Result<f64> {
        self.check_compatible(other)?;
        let c = self.cols as usize;
        let mut per_row: Vec<i64> = (0..self.rows as usize)
            .map(|r| {
                let a = &self.counters[r * c..(r + 1) * c];
                let b = &other.counters[r * c..(r + 1) * c];
                a.iter().zip(b).map(|(x, y)| x * y).sum()
            })
            .collect();
        Ok(median(&mut per_row))
    }

    /// Per-row sum of squared counters; each is an estimate of the squared
    /// L2 norm of the inserted frequencies.
    pub fn row_square_sums(&self) -> Vec<f64> {
        let c = self.cols as usize;
        self.counters
            .chunks(c)
            .map(|row| row.iter().map(|&x| (x as f64) * (x as f64)).sum())
            .collect()
    }

    pub fn check_compatible(&self, other: &CountSketch) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::MismatchedConfig("Count-Sketch dimensions differ"));
        }
        if self.seeds != other.seeds {
            return Err(Error::MismatchedConfig("Count-Sketch seeds differ"));
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &CountSketch) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.counters.iter_mut().zip(&other.counters) {
            *a += b;
        }
        Ok(())
    }

    pub(crate) fn encode_counters(&self, enc: &mut Encoder) {
        for &c in &self.counters {
            enc.i64(c);
        }
    }

    pub(crate) fn decode_counters(&mut self, dec: &mut Decoder<'_>) -> Result<()> {
        for c in self.counters.iter_mut() {
            *c = dec.i64()?;
        }
        Ok(())
    }
}

fn median(v: &mut [i64]) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    #[test]
    fn empty_estimates_zero() {
        let cs = CountSketch::new(3, 64, 1);
        assert!(cs.is_zero());
        assert_eq!(cs.estimate(42), 0.0);
    }

    #[test]
    fn single_update_exact() {
        let mut cs = CountSketch::new(3, 64, 1);
        cs.update(7, 3);
        assert_eq!(cs.estimate(7), 3.0);
        assert!(!cs.is_zero());
        assert_eq!(cs.inner_product(&cs).unwrap(), 9.0);
    }

    #[test]
    fn collision_error_within_tail_bound() {
        // exact frequency table as oracle; the median-of-rows error of a
        // typical item stays within the one-row collision scale L2/sqrt(cols)
        let cols = 1024;
        let mut cs = CountSketch::new(3, cols, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut exact: HashMap<u64, i64> = HashMap::new();
        for _ in 0..50_000 {
            let t = rng.random_range(0..5000u64);
            cs.update(t, 1);
            *exact.entry(t).or_default() += 1;
        }
        let l2 = (exact.values().map(|&f| (f * f) as f64).sum::<f64>()).sqrt();
        let scale = l2 / (cols as f64).sqrt();
        let errs: Vec<f64> = exact
            .iter()
            .map(|(&t, &f)| (cs.estimate(t) - f as f64).abs())
            .collect();
        let within = |k: f64| errs.iter().filter(|&&e| e <= k * scale).count() as f64 / errs.len() as f64;
        assert!(within(1.0) >= 0.7, "{}", within(1.0));
        assert!(within(3.0) >= 0.99, "{}", within(3.0));
    }

    #[test]
    fn merge_requires_same_seeds() {
        let mut a = CountSketch::new(3, 64, 1);
        let b = CountSketch::new(3, 64, 2);
        assert!(a.merge(&b).is_err());
        let c = CountSketch::new(3, 32, 1);
        assert!(a.merge(&c).is_err());
    }
}
