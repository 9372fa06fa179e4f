//! Quantiles, min and max over any recent sub-window: an exponential
//! histogram in the count regime whose buckets carry KLL sketches.

use crate::codec::{Decoder, Encoder};
use crate::eh::{EhWindow, Regime, Selection, Summary};
use crate::error::{Error, Result};
use crate::hash::hash_u64;
use crate::kll::KllSketch;
use crate::model::{SketchConfig, TimeWindow, Timestamp};

impl Summary for KllSketch {
    fn merge_from(&mut self, other: &Self) -> Result<()> {
        self.merge(other)
    }

    fn merge_many(&mut self, others: &[&Self]) -> Result<()> {
        KllSketch::merge_many(self, others.iter().copied())
    }

    fn byte_size(&self) -> usize {
        self.serialized_len()
    }
}

/// Answer plus what the caller needs to size its error.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowEstimate<T> {
    pub value: T,
    /// Both window ends fell inside one bucket.
    pub single_bucket: bool,
    /// Items in the merged buckets.
    pub merged_items: u64,
    /// Items from the first merged bucket to the newest.
    pub suffix_items: u64,
}

#[derive(Debug, Clone)]
pub struct EhKll {
    window: EhWindow<KllSketch>,
    k_kll: u32,
    seed: u64,
}

impl EhKll {
    pub fn new(config: &SketchConfig, span: i64) -> Result<Self> {
        config.validate()?;
        if span <= 0 {
            return Err(Error::InvalidConfig("window span must be positive".into()));
        }
        Ok(Self {
            window: EhWindow::new(config.k_eh, Regime::Count, span),
            k_kll: config.k_kll,
            seed: config.seed,
        })
    }

    pub fn window(&self) -> &EhWindow<KllSketch> {
        &self.window
    }

    pub fn set_span(&mut self, span: i64) {
        self.window.set_span(span);
    }

    pub fn insert(&mut self, t: Timestamp, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::NonFiniteValue);
        }
        let mut one = KllSketch::new(self.k_kll, hash_u64(self.window.inserted(), self.seed));
        one.update(v);
        self.window.insert(t, one)
    }

    pub fn expire(&mut self, now: Timestamp) {
        self.window.expire(now);
    }

    pub fn byte_size(&self) -> usize {
        self.window.byte_size()
    }

    /// Merged sketch over the buckets covering `q`.
    pub fn sketch_for(&self, q: &TimeWindow) -> Result<(KllSketch, Selection)> {
        let sel = self.window.select(q)?;
        Ok((self.window.merge_range(&sel)?, sel))
    }

    pub fn quantile(&self, q: &TimeWindow, phi: f64) -> Result<WindowEstimate<f64>> {
        Ok(self.quantiles(q, &[phi])?.map(|v| v[0]))
    }

    pub fn quantiles(&self, q: &TimeWindow, phis: &[f64]) -> Result<WindowEstimate<Vec<f64>>> {
        let (sk, sel) = self.sketch_for(q)?;
        let value = sk.quantiles(phis).map_err(|e| match e {
            Error::EmptySketch => Error::EmptyRange,
            e => e,
        })?;
        Ok(self.annotate(value, &sel))
    }

    pub fn min(&self, q: &TimeWindow) -> Result<WindowEstimate<f64>> {
        self.quantile(q, 0.0)
    }

    pub fn max(&self, q: &TimeWindow) -> Result<WindowEstimate<f64>> {
        self.quantile(q, 1.0)
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.k_kll).u64(self.seed);
        self.window.encode_with(enc, |s, e| s.encode(e));
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let k_kll = dec.u32()?;
        let seed = dec.u64()?;
        let window = EhWindow::decode_with(dec, KllSketch::decode)?;
        if window.regime() != Regime::Count || window.buckets().iter().any(|b| b.summary.k() != k_kll) {
            return Err(Error::Codec("quantile histogram payload mismatch".into()));
        }
        Ok(Self { window, k_kll, seed })
    }

    fn annotate<T>(&self, value: T, sel: &Selection) -> WindowEstimate<T> {
        WindowEstimate {
            value,
            single_bucket: sel.single_bucket,
            merged_items: self.window.range_count(sel),
            suffix_items: self.window.suffix_count(*sel.range().start()),
        }
    }
}

impl<T> WindowEstimate<T> {
    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> WindowEstimate<U> {
        WindowEstimate {
            value: f(self.value),
            single_bucket: self.single_bucket,
            merged_items: self.merged_items,
            suffix_items: self.suffix_items,
        }
    }
}
