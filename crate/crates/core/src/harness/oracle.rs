//! Reference statistics over raw windows, written separately from the
//! query engine's exact path so the two can check each other.
//!
//! Numeric conventions shared with the engine: sums run in time order,
//! variance is two-pass with `n - 1`, entropy and L2 add frequency classes
//! in ascending frequency.

use std::collections::BTreeMap;

use crate::model::float_token;

/// Order statistic at rank `ceil(phi * n)` (at least 1) of a sorted slice.
pub fn quantile(sorted: &[f64], phi: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let r = (phi.clamp(0.0, 1.0) * n as f64).ceil() as usize;
    Some(sorted[r.clamp(1, n) - 1])
}

pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    v
}

/// Item -> count.
pub fn frequencies(tokens: impl IntoIterator<Item = u64>) -> BTreeMap<u64, u64> {
    let mut m = BTreeMap::new();
    for t in tokens {
        *m.entry(t).or_insert(0u64) += 1;
    }
    m
}

pub fn value_frequencies(values: &[f64]) -> BTreeMap<u64, u64> {
    frequencies(values.iter().map(|&v| float_token(v)))
}

/// Counts sorted ascending, grouped into (count, how many items) runs.
fn classes(freq: &BTreeMap<u64, u64>) -> Vec<(u64, u64)> {
    let mut counts: Vec<u64> = freq.values().copied().collect();
    counts.sort_unstable();
    let mut out: Vec<(u64, u64)> = Vec::new();
    for c in counts {
        match out.last_mut() {
            Some((f, m)) if *f == c => *m += 1,
            _ => out.push((c, 1)),
        }
    }
    out
}

pub fn distinct(freq: &BTreeMap<u64, u64>) -> f64 {
    freq.len() as f64
}

pub fn total(freq: &BTreeMap<u64, u64>) -> f64 {
    freq.values().sum::<u64>() as f64
}

pub fn l2(freq: &BTreeMap<u64, u64>) -> f64 {
    let mut s = 0.0;
    for (f, m) in classes(freq) {
        s += m as f64 * (f as f64 * f as f64);
    }
    s.sqrt()
}

/// Base-2 entropy of the empirical item distribution.
pub fn entropy(freq: &BTreeMap<u64, u64>) -> f64 {
    let n = total(freq);
    if n == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    for (f, m) in classes(freq) {
        let f = f as f64;
        s += m as f64 * f * f.log2();
    }
    (n.log2() - s / n).clamp(0.0, n.log2())
}

/// Items by count descending, ties by token ascending.
pub fn top(freq: &BTreeMap<u64, u64>, k: usize) -> Vec<(u64, u64)> {
    let mut v: Vec<(u64, u64)> = freq.iter().map(|(&t, &c)| (t, c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

pub fn sum(values: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in values {
        s += v;
    }
    s
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| sum(values) / values.len() as f64)
}

/// Sample variance, `n - 1` denominator.
pub fn variance(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let mut ss = 0.0;
    for v in values {
        ss += (v - m) * (v - m);
    }
    Some(ss / (values.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.5), Some(2.0));
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.0), Some(1.0));
        let f = frequencies([1, 1, 2, 2]);
        assert_eq!(entropy(&f), 1.0);
        assert_eq!(distinct(&frequencies([7, 7, 7])), 1.0);
        assert_eq!(l2(&frequencies([7, 7, 7])), 3.0);
        assert_eq!(variance(&[1.0, 2.0, 3.0]), Some(1.0));
        assert_eq!(top(&f, 1), vec![(1, 2)]);
    }
}
