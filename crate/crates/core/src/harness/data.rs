//! Seeded stream generators and the CSV trace reader.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SampleValue, Timestamp};

/// Spacing between generated samples.
pub const STEP_MS: i64 = 100;
/// Largest generated value; values lie in `[0, MAX_VALUE]`.
pub const MAX_VALUE: u32 = 100_000;
pub const ZIPF_EXPONENT: f64 = 1.01;
/// Points per distribution in the dynamic stream.
pub const DYNAMIC_PHASE: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Zipf,
    Uniform,
    /// Zipf, then uniform, then normal(50000, 10000) rounded, repeating.
    Dynamic,
}

/// Inverse-CDF sampler for `P(k) ~ (1 + k)^-s` on `0..=max`.
#[derive(Debug, Clone)]
pub struct ZipfTable {
    cdf: Vec<f64>,
}

impl ZipfTable {
    pub fn new(max: u32, s: f64) -> Self {
        let mut cdf = Vec::with_capacity(max as usize + 1);
        let mut acc = 0.0;
        for k in 0..=max {
            acc += (1.0 + k as f64).powf(-s);
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        Self { cdf }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u32 {
        let u: f64 = rng.random();
        let i = self.cdf.partition_point(|&c| c < u);
        i.min(self.cdf.len() - 1) as u32
    }
}

/// Timestamp of the `i`-th generated sample (0-based).
pub fn ts_of(i: usize) -> Timestamp {
    (i as i64 + 1) * STEP_MS
}

/// `n` values with timestamps `100, 200, ...`; identical for equal seeds.
pub fn generate(kind: Dataset, n: usize, seed: u64) -> Vec<(Timestamp, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = ZipfTable::new(MAX_VALUE, ZIPF_EXPONENT);
    let normal = Normal::<f64>::new(50_000.0, 10_000.0).expect("valid normal");
    (0..n)
        .map(|i| {
            let phase = match kind {
                Dataset::Zipf => 0,
                Dataset::Uniform => 1,
                Dataset::Dynamic => (i / DYNAMIC_PHASE) % 3,
            };
            let v = match phase {
                0 => zipf.sample(&mut rng) as f64,
                1 => rng.random_range(0..=MAX_VALUE) as f64,
                _ => normal.sample(&mut rng).round(),
            };
            (ts_of(i), v)
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    ts_ms: Timestamp,
    value: String,
}

/// Read a `ts_ms,value` CSV trace. Values that parse as finite floats are
/// numbers, anything else is a string item.
pub fn read_trace(path: &Path) -> Result<Vec<(Timestamp, SampleValue)>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let row: TraceRow = row.map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let v = match row.value.trim().parse::<f64>() {
            Ok(x) if x.is_finite() => SampleValue::Float(x),
            _ => SampleValue::Str(row.value),
        };
        out.push((row.ts_ms, v));
    }
    Ok(out)
}
