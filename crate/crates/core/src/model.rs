//! Shared domain types: series identity, samples, windows and sketch
//! configuration.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{mix64, stable_hash};

/// Milliseconds since the Unix epoch.
pub type Timestamp = i64;

/// Identity of one timeseries: metric name plus a sorted, duplicate-free
/// label set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeriesId {
    metric: String,
    labels: Vec<(String, String)>,
    canonical_id: u64,
}

impl SeriesId {
    /// Sorts labels by name and rejects repeated names.
    pub fn canonicalize<M, I, K, V>(metric: M, labels: I) -> Result<Self>
    where
        M: Into<String>,
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let metric = metric.into();
        if metric.is_empty() {
            return Err(Error::EmptyMetric);
        }
        let mut labels: Vec<(String, String)> = labels
            .into_iter()
            .map(|(k, v)| (k.into(), v.into()))
            .collect();
        if labels.iter().any(|(k, _)| k.is_empty()) {
            return Err(Error::EmptyLabelName);
        }
        labels.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = labels.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateLabel(w[0].0.clone()));
        }
        let canonical_id = Self::hash_of(&metric, &labels);
        Ok(Self {
            metric,
            labels,
            canonical_id,
        })
    }

    fn hash_of(metric: &str, labels: &[(String, String)]) -> u64 {
        // 0xff never occurs in UTF-8, so it separates fields unambiguously
        let mut buf = Vec::with_capacity(64);
        buf.extend_from_slice(metric.as_bytes());
        for (k, v) in labels {
            buf.push(0xff);
            buf.extend_from_slice(k.as_bytes());
            buf.push(0xfe);
            buf.extend_from_slice(v.as_bytes());
        }
        stable_hash(&buf)
    }

    pub fn metric(&self) -> &str {
        &self.metric
    }

    pub fn labels(&self) -> &[(String, String)] {
        &self.labels
    }

    pub fn label(&self, name: &str) -> Option<&str> {
        self.labels
            .binary_search_by(|(k, _)| k.as_str().cmp(name))
            .ok()
            .map(|i| self.labels[i].1.as_str())
    }

    pub fn canonical_id(&self) -> u64 {
        self.canonical_id
    }
}

impl fmt::Display for SeriesId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.metric)?;
        if !self.labels.is_empty() {
            f.write_str("{")?;
            for (i, (k, v)) in self.labels.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{k}={v:?}")?;
            }
            f.write_str("}")?;
        }
        Ok(())
    }
}

/// A sample value: a float, or a string item (e.g. a source address) that
/// only its identity matters for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleValue {
    Float(f64),
    Str(String),
}

impl SampleValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            SampleValue::Float(v) => Some(*v),
            SampleValue::Str(_) => None,
        }
    }

    /// 64-bit item token used by frequency statistics.
    pub fn token(&self) -> u64 {
        match self {
            SampleValue::Float(v) => float_token(*v),
            SampleValue::Str(s) => str_token(s),
        }
    }
}

impl From<f64> for SampleValue {
    fn from(v: f64) -> Self {
        SampleValue::Float(v)
    }
}

impl From<&str> for SampleValue {
    fn from(v: &str) -> Self {
        SampleValue::Str(v.to_owned())
    }
}

/// Token of a float item. `-0.0` and `0.0` are the same item.
#[inline]
pub fn float_token(v: f64) -> u64 {
    if v == 0.0 {
        0.0f64.to_bits()
    } else {
        v.to_bits()
    }
}

#[inline]
pub fn str_token(s: &str) -> u64 {
    // keep string tokens out of the float-bit space of small non-negative numbers
    mix64(stable_hash(s.as_bytes())) | (1 << 63)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSample {
    pub series: SeriesId,
    pub timestamp: Timestamp,
    pub value: SampleValue,
}

impl DataSample {
    pub fn new(series: SeriesId, timestamp: Timestamp, value: impl Into<SampleValue>) -> Result<Self> {
        let value = value.into();
        if timestamp < 0 {
            return Err(Error::InvalidConfig(format!("negative timestamp {timestamp}")));
        }
        if let SampleValue::Float(v) = value {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue);
            }
        }
        Ok(Self {
            series,
            timestamp,
            value,
        })
    }
}

/// Half-open time interval `(start, end]`: samples at `start` are excluded,
/// samples at `end` included, so consecutive windows tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimeWindow {
    pub fn new(start: Timestamp, end: Timestamp) -> Result<Self> {
        if start >= end {
            return Err(Error::InvalidWindow { start, end });
        }
        Ok(Self { start, end })
    }

    #[inline]
    pub fn contains(&self, t: Timestamp) -> bool {
        self.start < t && t <= self.end
    }

    pub fn span(&self) -> i64 {
        self.end - self.start
    }
}

/// Sketch parameters shared by every structure in one cache instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SketchConfig {
    /// Exponential histogram error knob; `1/k_eh` is the window error.
    pub k_eh: u32,
    /// KLL compactor width.
    pub k_kll: u32,
    pub univ_layers: u32,
    pub cs_rows: u32,
    /// Count-Sketch width for the upper (densely sampled) half of the layers.
    pub cs_cols_top: u32,
    /// Count-Sketch width for the lower half.
    pub cs_cols_bottom: u32,
    /// Heavy-hitter candidates tracked per universal-sketch layer.
    pub hh_capacity: u32,
    /// Frequency maps larger than this (serialized bytes) become sketches.
    pub map_threshold_bytes: u64,
    pub sample_prob: f64,
    pub confidence_delta: f64,
    pub seed: u64,
}

/// Relative error target that sizes the heavy-hitter heaps.
const HH_EPSILON: f64 = 0.05;
const HH_CAP: u32 = 1024;

impl SketchConfig {
    /// Quantile family defaults: `k_eh = 50`, `k_kll = 256`.
    pub fn quantile_default() -> Self {
        Self {
            k_eh: 50,
            k_kll: 256,
            ..Self::base()
        }
    }

    /// GSum family defaults: `k_eh = 20` and a 16-layer pyramid of 3-row
    /// Count Sketches (8 layers of 2048 columns over 8 layers of 512).
    pub fn gsum_default() -> Self {
        let mut c = Self {
            k_eh: 20,
            ..Self::base()
        };
        c.map_threshold_bytes = crate::univ::UnivSketch::serialized_len_for(&c) as u64;
        c
    }

    /// Sampling family defaults: admit with probability 0.1.
    pub fn sample_default() -> Self {
        Self::base()
    }

    fn base() -> Self {
        let cs_rows = 3;
        Self {
            k_eh: 50,
            k_kll: 256,
            univ_layers: 16,
            cs_rows,
            cs_cols_top: 2048,
            cs_cols_bottom: 512,
            hh_capacity: default_hh_capacity(cs_rows),
            map_threshold_bytes: 1 << 19,
            sample_prob: 0.1,
            confidence_delta: 0.05,
            seed: 0x5eed_cafe_f00d_0001,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Count-Sketch width for a universal-sketch layer.
    pub fn cs_cols_for_layer(&self, layer: u32) -> u32 {
        if layer < self.univ_layers.div_ceil(2) {
            self.cs_cols_top
        } else {
            self.cs_cols_bottom
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.k_eh == 0 || self.k_kll < 2 {
            return bad("k_eh must be >= 1 and k_kll >= 2");
        }
        if self.univ_layers == 0 || self.univ_layers > 64 {
            return bad("univ_layers must be in 1..=64");
        }
        if self.cs_rows == 0 || self.hh_capacity == 0 {
            return bad("cs_rows and hh_capacity must be positive");
        }
        if !self.cs_cols_top.is_power_of_two() || !self.cs_cols_bottom.is_power_of_two() {
            return bad("Count-Sketch widths must be powers of two");
        }
        if self.cs_cols_bottom > self.cs_cols_top {
            return bad("cs_cols_bottom must not exceed cs_cols_top");
        }
        if self.map_threshold_bytes == 0 {
            return bad("map_threshold_bytes must be positive");
        }
        if !(self.sample_prob > 0.0 && self.sample_prob <= 1.0) {
            return bad("sample_prob must be in (0, 1]");
        }
        if !(self.confidence_delta > 0.0 && self.confidence_delta < 1.0) {
            return bad("confidence_delta must be in (0, 1)");
        }
        Ok(())
    }
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self::base()
    }
}

/// `2 * rows * ceil(1/eps^2)`, capped.
pub fn default_hh_capacity(cs_rows: u32) -> u32 {
    let per_row = (1.0 / (HH_EPSILON * HH_EPSILON)).ceil() as u32;
    (2 * cs_rows * per_row).min(HH_CAP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_label_kept() {
        let s = SeriesId::canonicalize("cpu", [("node", "n0")]).unwrap();
        assert_eq!(s.labels(), &[("node".to_string(), "n0".to_string())]);
    }

    #[test]
    fn labels_sorted() {
        let s = SeriesId::canonicalize("cpu", [("b", "1"), ("a", "2")]).unwrap();
        assert_eq!(
            s.labels(),
            &[("a".into(), "2".into()), ("b".into(), "1".into())]
        );
        assert_eq!(s.label("b"), Some("1"));
        assert_eq!(s.to_string(), r#"cpu{a="2",b="1"}"#);
    }

    #[test]
    fn duplicate_label_rejected() {
        let e = SeriesId::canonicalize("cpu", [("a", "1"), ("a", "2")]).unwrap_err();
        assert!(matches!(e, Error::DuplicateLabel(n) if n == "a"));
        assert!(matches!(
            SeriesId::canonicalize("", Vec::<(String, String)>::new()),
            Err(Error::EmptyMetric)
        ));
        assert!(matches!(
            SeriesId::canonicalize("m", [("", "x")]),
            Err(Error::EmptyLabelName)
        ));
    }

    #[test]
    fn window_membership() {
        let w = TimeWindow::new(0, 10).unwrap();
        assert!(w.contains(10));
        assert!(!w.contains(0));
        assert!(w.contains(5));
        assert!(TimeWindow::new(5, 5).is_err());
    }

    #[test]
    fn samples_validated() {
        let s = SeriesId::canonicalize("m", Vec::<(String, String)>::new()).unwrap();
        assert!(matches!(
            DataSample::new(s.clone(), 1, f64::NAN),
            Err(Error::NonFiniteValue)
        ));
        assert!(DataSample::new(s.clone(), -1, 1.0).is_err());
        assert!(DataSample::new(s, 0, "10.0.0.1").is_ok());
    }

    #[test]
    fn default_configs_valid() {
        SketchConfig::quantile_default().validate().unwrap();
        SketchConfig::gsum_default().validate().unwrap();
        SketchConfig::sample_default().validate().unwrap();
        assert_eq!(SketchConfig::gsum_default().hh_capacity, 1024);
        let c = SketchConfig::gsum_default();
        assert_eq!(c.cs_cols_for_layer(0), 2048);
        assert_eq!(c.cs_cols_for_layer(7), 2048);
        assert_eq!(c.cs_cols_for_layer(8), 512);
    }

    #[test]
    fn zero_tokens_agree() {
        assert_eq!(float_token(0.0), float_token(-0.0));
        assert_ne!(float_token(1.0), float_token(2.0));
    }

    fn label_set() -> impl Strategy<Value = Vec<(String, String)>> {
        prop::collection::btree_map("[a-z]{1,6}", "[a-z0-9]{0,6}", 0..6)
            .prop_map(|m| m.into_iter().collect())
    }

    proptest! {
        #[test]
        fn canonicalize_idempotent(metric in "[a-z_]{1,10}", mut labels in label_set(), rot in 0usize..6) {
            if !labels.is_empty() {
                let r = rot % labels.len();
                labels.rotate_left(r);
            }
            let a = SeriesId::canonicalize(metric.clone(), labels.clone()).unwrap();
            let b = SeriesId::canonicalize(a.metric().to_owned(), a.labels().to_vec()).unwrap();
            prop_assert_eq!(&a, &b);
            labels.reverse();
            let c = SeriesId::canonicalize(metric, labels).unwrap();
            prop_assert_eq!(a.canonical_id(), c.canonical_id());
        }
    }
}
