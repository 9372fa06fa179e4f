//! Uniform Bernoulli sample of the most recent window, for moments over any
//! sub-window.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::model::{TimeWindow, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MomentStat {
    Avg,
    Sum,
    Count,
    StdDev,
    StdVar,
}

impl MomentStat {
    pub const ALL: [MomentStat; 5] = [
        MomentStat::Avg,
        MomentStat::Sum,
        MomentStat::Count,
        MomentStat::StdDev,
        MomentStat::StdVar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MomentStat::Avg => "avg",
            MomentStat::Sum => "sum",
            MomentStat::Count => "count",
            MomentStat::StdDev => "stddev",
            MomentStat::StdVar => "stdvar",
        }
    }
}

/// Moment of a time-ordered slice of values. `scale` multiplies SUM and
/// COUNT (inverse sampling probability).
///
/// Sum runs in slice order; variance is the two-pass `n - 1` form.
pub fn moment(values: &[f64], stat: MomentStat, scale: f64) -> Result<f64> {
    let n = values.len();
    let need = match stat {
        MomentStat::Count | MomentStat::Sum => 0,
        MomentStat::Avg => 1,
        MomentStat::StdDev | MomentStat::StdVar => 2,
    };
    if n == 0 && need > 0 {
        return Err(Error::EmptyRange);
    }
    if n < need {
        return Err(Error::InsufficientSamples { needed: need, found: n });
    }
    let sum = || values.iter().sum::<f64>();
    Ok(match stat {
        MomentStat::Count => n as f64 * scale,
        MomentStat::Sum => sum() * scale,
        MomentStat::Avg => sum() / n as f64,
        MomentStat::StdVar | MomentStat::StdDev => {
            let mean = sum() / n as f64;
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            let var = ss / (n - 1) as f64;
            if stat == MomentStat::StdDev {
                var.sqrt()
            } else {
                var
            }
        }
    })
}

#[derive(Debug, Clone)]
pub struct SampleWindow {
    samples: VecDeque<(Timestamp, f64)>,
    p: f64,
    span: i64,
    rng: ChaCha8Rng,
    newest_ts: Option<Timestamp>,
}

impl SampleWindow {
    pub fn new(p: f64, span: i64, seed: u64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidConfig("sample_prob must be in (0, 1]".into()));
        }
        if span <= 0 {
            return Err(Error::InvalidConfig("window span must be positive".into()));
        }
        Ok(Self {
            samples: VecDeque::new(),
            p,
            span,
            rng: ChaCha8Rng::seed_from_u64(seed),
            newest_ts: None,
        })
    }

    pub fn prob(&self) -> f64 {
        self.p
    }

    pub fn span(&self) -> i64 {
        self.span
    }

    pub fn set_span(&mut self, span: i64) {
        assert!(span > 0);
        self.span = span;
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn newest_ts(&self) -> Option<Timestamp> {
        self.newest_ts
    }

    pub fn oldest_ts(&self) -> Option<Timestamp> {
        self.samples.front().map(|s| s.0)
    }

    /// Serialized size: timestamp and value per retained sample.
    pub fn byte_size(&self) -> usize {
        16 * self.samples.len()
    }

    pub fn insert(&mut self, t: Timestamp, v: f64) -> Result<()> {
        if let Some(newest) = self.newest_ts {
            if t < newest {
                return Err(Error::OutOfOrder { ts: t, newest });
            }
        }
        if !v.is_finite() {
            return Err(Error::NonFiniteValue);
        }
        self.newest_ts = Some(t);
        if self.p >= 1.0 || self.rng.random::<f64>() < self.p {
            self.samples.push_back((t, v));
        }
        self.expire(t);
        Ok(())
    }

    pub fn expire(&mut self, now: Timestamp) {
        let cutoff = now - self.span;
        while self.samples.front().is_some_and(|s| s.0 <= cutoff) {
            self.samples.pop_front();
        }
    }

    /// Retained values in `(q.start, q.end]`, oldest first.
    pub fn values_in(&self, q: &TimeWindow) -> Vec<f64> {
        let lo = self.samples.partition_point(|s| s.0 <= q.start);
        let hi = self.samples.partition_point(|s| s.0 <= q.end);
        self.samples.range(lo..hi).map(|s| s.1).collect()
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.f64(self.p)
            .i64(self.span)
            .u8(self.newest_ts.is_some() as u8)
            .i64(self.newest_ts.unwrap_or(0))
            .len_prefixed(&self.rng.get_seed())
            .u64(self.rng.get_stream())
            .u64((self.rng.get_word_pos() >> 64) as u64)
            .u64(self.rng.get_word_pos() as u64)
            .u64(self.samples.len() as u64);
        for &(t, v) in &self.samples {
            enc.i64(t).f64(v);
        }
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let p = dec.f64()?;
        let span = dec.i64()?;
        let has_newest = dec.u8()? == 1;
        let newest = dec.i64()?;
        let seed: [u8; 32] = dec
            .len_prefixed()?
            .try_into()
            .map_err(|_| Error::Codec("sampler seed must be 32 bytes".into()))?;
        let stream = dec.u64()?;
        let word_pos = ((dec.u64()? as u128) << 64) | dec.u64()? as u128;
        let mut s = Self::new(p, span, 0).map_err(|e| Error::Codec(e.to_string()))?;
        s.rng = ChaCha8Rng::from_seed(seed);
        s.rng.set_stream(stream);
        s.rng.set_word_pos(word_pos);
        s.newest_ts = has_newest.then_some(newest);
        let n = dec.u64()? as usize;
        if n > dec.remaining() / 16 {
            return Err(Error::Codec("sample count exceeds input".into()));
        }
        let mut prev = i64::MIN;
        for _ in 0..n {
            let (t, v) = (dec.i64()?, dec.f64()?);
            if t < prev {
                return Err(Error::Codec("samples out of order".into()));
            }
            prev = t;
            s.samples.push_back((t, v));
        }
        Ok(s)
    }

    pub fn query(&self, q: &TimeWindow, stat: MomentStat) -> Result<f64> {
        let newest = self.newest_ts.ok_or(Error::EmptyWindow)?;
        if q.end > newest || q.start < newest - self.span {
            return Err(Error::QueryOutsideWindow);
        }
        let vals = self.values_in(q);
        if vals.is_empty() {
            return Err(Error::EmptyRange);
        }
        moment(&vals, stat, 1.0 / self.p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_rate_is_exact() {
        let mut s = SampleWindow::new(1.0, 1_000, 1).unwrap();
        for (t, v) in [(1, 1.0), (2, 2.0), (3, 3.0)] {
            s.insert(t, v).unwrap();
        }
        let q = TimeWindow::new(0, 3).unwrap();
        assert_eq!(s.query(&q, MomentStat::Avg).unwrap(), 2.0);
        assert_eq!(s.query(&q, MomentStat::Sum).unwrap(), 6.0);
        assert_eq!(s.query(&q, MomentStat::Count).unwrap(), 3.0);
        assert_eq!(s.query(&q, MomentStat::StdVar).unwrap(), 1.0);
        assert_eq!(s.query(&q, MomentStat::StdDev).unwrap(), 1.0);
    }

    #[test]
    fn binomial_retention() {
        let n = 1_000_000;
        let mut s = SampleWindow::new(0.1, i64::MAX / 2, 42).unwrap();
        for t in 0..n {
            s.insert(t, 0.0).unwrap();
        }
        let mean = n as f64 * 0.1;
        let sd = (n as f64 * 0.1 * 0.9).sqrt();
        assert!((s.len() as f64 - mean).abs() <= 3.0 * sd, "{}", s.len());
    }

    #[test]
    fn out_of_order_and_empty() {
        let mut s = SampleWindow::new(1.0, 100, 1).unwrap();
        s.insert(10, 1.0).unwrap();
        assert!(matches!(s.insert(9, 1.0), Err(Error::OutOfOrder { .. })));
        s.insert(20, 1.0).unwrap();
        let q = TimeWindow::new(10, 15).unwrap();
        assert!(matches!(s.query(&q, MomentStat::Avg), Err(Error::EmptyRange)));
        let q = TimeWindow::new(15, 20).unwrap();
        assert!(matches!(
            s.query(&q, MomentStat::StdVar),
            Err(Error::InsufficientSamples { needed: 2, found: 1 })
        ));
    }

    #[test]
    fn eviction_keeps_window() {
        let mut s = SampleWindow::new(0.5, 50, 3).unwrap();
        for t in 0..1_000 {
            s.insert(t, t as f64).unwrap();
            assert!(s.oldest_ts().is_none_or(|o| o > t - 50));
        }
    }

    #[test]
    fn codec_roundtrip_continues_stream() {
        let mut a = SampleWindow::new(0.4, 10_000, 5).unwrap();
        for t in 0..500 {
            a.insert(t, t as f64).unwrap();
        }
        let mut enc = Encoder::new();
        a.encode(&mut enc);
        let bytes = enc.into_bytes();
        let mut b = SampleWindow::decode(&mut Decoder::new(&bytes)).unwrap();
        for t in 500..1_000 {
            a.insert(t, t as f64).unwrap();
            b.insert(t, t as f64).unwrap();
        }
        let q = TimeWindow::new(0, 999).unwrap();
        assert_eq!(a.values_in(&q), b.values_in(&q));
    }

    #[test]
    fn deterministic_under_seed() {
        let run = || {
            let mut s = SampleWindow::new(0.3, 1_000_000, 9).unwrap();
            for t in 0..10_000 {
                s.insert(t, (t % 17) as f64).unwrap();
            }
            s.values_in(&TimeWindow::new(0, 9_999).unwrap())
        };
        assert_eq!(run(), run());
    }
}
