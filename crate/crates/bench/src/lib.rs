//! Shared inputs for the criterion benches.

use winsketch::harness::{generate, Dataset};
use winsketch::model::float_token;

/// Zipf values with their timestamps.
pub fn zipf(n: usize) -> Vec<(i64, f64)> {
    generate(Dataset::Zipf, n, 1)
}

pub fn zipf_tokens(n: usize) -> Vec<(i64, u64)> {
    zipf(n).into_iter().map(|(t, v)| (t, float_token(v))).collect()
}
