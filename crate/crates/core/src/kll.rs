//! KLL quantile sketch: a hierarchy of compactors with geometrically shrinking
//! capacities, additive rank error, and full mergeability.
//!
//! Level `h` holds items of weight `2^h`. When a level overflows it is sorted
//! and every other item (random parity) is promoted one level up. Exact
//! running extremes are carried alongside so the 0- and 1-quantiles are exact.

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::hash::SplitMix64;

const SHRINK: f64 = 2.0 / 3.0;
const MIN_CAPACITY: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct KllSketch {
    k: u32,
    levels: Vec<Vec<f64>>,
    caps: Vec<usize>,
    n: u64,
    min: f64,
    max: f64,
    rng: SplitMix64,
}

impl KllSketch {
    pub fn new(k: u32, seed: u64) -> Self {
        assert!(k >= 2, "KLL width must be at least 2");
        let mut s = Self {
            k,
            levels: vec![Vec::new()],
            caps: Vec::new(),
            n: 0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            rng: SplitMix64(seed),
        };
        s.recompute_caps();
        s
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn len(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn min(&self) -> Option<f64> {
        (self.n > 0).then_some(self.min)
    }

    pub fn max(&self) -> Option<f64> {
        (self.n > 0).then_some(self.max)
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Number of values physically retained across all levels.
    pub fn stored_len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn level(&self, h: usize) -> &[f64] {
        &self.levels[h]
    }

    /// `max(ceil(k * (2/3)^(H - h)), 2)` with `H` the top level index.
    pub fn capacity(&self, h: usize) -> usize {
        self.caps[h]
    }

    fn recompute_caps(&mut self) {
        let top = self.levels.len() - 1;
        self.caps = (0..=top)
            .map(|h| {
                let c = (self.k as f64 * SHRINK.powi((top - h) as i32)).ceil() as usize;
                c.max(MIN_CAPACITY)
            })
            .collect();
    }

    /// Caller guarantees `v` is finite.
    pub fn update(&mut self, v: f64) {
        debug_assert!(v.is_finite());
        self.levels[0].push(v);
        self.n += 1;
        if v < self.min {
            self.min = v;
        }
        if v > self.max {
            self.max = v;
        }
        if self.levels[0].len() > self.caps[0] {
            self.compress();
        }
    }

    pub fn merge(&mut self, other: &KllSketch) -> Result<()> {
        self.absorb(other)?;
        self.compress();
        Ok(())
    }

    /// Merge several sketches with a single compaction pass at the end.
    pub fn merge_many<'a, I>(&mut self, others: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a KllSketch>,
    {
        for o in others {
            self.absorb(o)?;
        }
        self.compress();
        Ok(())
    }

    fn absorb(&mut self, other: &KllSketch) -> Result<()> {
        if other.k != self.k {
            return Err(Error::MismatchedConfig("KLL width differs"));
        }
        if other.n == 0 {
            return Ok(());
        }
        if other.levels.len() > self.levels.len() {
            self.levels.resize_with(other.levels.len(), Vec::new);
            self.recompute_caps();
        }
        for (dst, src) in self.levels.iter_mut().zip(&other.levels) {
            dst.extend_from_slice(src);
        }
        self.n += other.n;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        Ok(())
    }

    /// Compact the lowest over-full level until every level fits.
    fn compress(&mut self) {
        while let Some(h) = (0..self.levels.len()).find(|&h| self.levels[h].len() > self.caps[h]) {
            if h + 1 == self.levels.len() {
                self.levels.push(Vec::new());
                self.recompute_caps();
            }
            self.compact_level(h);
        }
    }

    fn compact_level(&mut self, h: usize) {
        let (lower, upper) = self.levels.split_at_mut(h + 1);
        let buf = &mut lower[h];
        buf.sort_unstable_by(f64::total_cmp);
        // an odd item stays behind at its own weight
        let held = if buf.len() % 2 == 1 { buf.pop() } else { None };
        let offset = self.rng.next_bool() as usize;
        upper[0].extend(buf.iter().skip(offset).step_by(2));
        buf.clear();
        buf.extend(held);
    }

    /// Weighted values sorted ascending.
    fn sorted_weighted(&self) -> Vec<(f64, u64)> {
        let mut out = Vec::with_capacity(self.stored_len());
        for (h, lvl) in self.levels.iter().enumerate() {
            let w = 1u64 << h;
            out.extend(lvl.iter().map(|&v| (v, w)));
        }
        out.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        out
    }

    /// Smallest stored value whose cumulative weight reaches `ceil(phi * n)`
    /// (at least rank 1). `phi = 0` and `phi = 1` return the exact extremes.
    pub fn quantile(&self, phi: f64) -> Result<f64> {
        if self.n == 0 {
            return Err(Error::EmptySketch);
        }
        let phi = phi.clamp(0.0, 1.0);
        if phi == 0.0 {
            return Ok(self.min);
        }
        if phi == 1.0 {
            return Ok(self.max);
        }
        Ok(self.quantile_in(&self.sorted_weighted(), phi))
    }

    /// Answer several quantiles off one sorted view.
    pub fn quantiles(&self, phis: &[f64]) -> Result<Vec<f64>> {
        if self.n == 0 {
            return Err(Error::EmptySketch);
        }
        let sorted = self.sorted_weighted();
        Ok(phis
            .iter()
            .map(|&p| match p.clamp(0.0, 1.0) {
                0.0 => self.min,
                1.0 => self.max,
                p => self.quantile_in(&sorted, p),
            })
            .collect())
    }

    fn quantile_in(&self, sorted: &[(f64, u64)], phi: f64) -> f64 {
        let target = ((phi * self.n as f64).ceil() as u64).max(1);
        let mut acc = 0u64;
        for &(v, w) in sorted {
            acc += w;
            if acc >= target {
                return v.clamp(self.min, self.max);
            }
        }
        self.max
    }

    /// Estimated number of inserted items `<= x`.
    pub fn rank(&self, x: f64) -> Result<u64> {
        if self.n == 0 {
            return Err(Error::EmptySketch);
        }
        if x < self.min {
            return Ok(0);
        }
        if x >= self.max {
            return Ok(self.n);
        }
        let mut r = 0u64;
        for (h, lvl) in self.levels.iter().enumerate() {
            let c = lvl.iter().filter(|&&v| v <= x).count() as u64;
            r += c << h;
        }
        Ok(r)
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.k)
            .u64(self.n)
            .f64(self.min)
            .f64(self.max)
            .u64(self.rng.0)
            .u32(self.levels.len() as u32);
        for lvl in &self.levels {
            enc.u32(lvl.len() as u32);
            for &v in lvl {
                enc.f64(v);
            }
        }
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let k = dec.u32()?;
        if k < 2 {
            return Err(Error::Codec("KLL width below 2".into()));
        }
        let n = dec.u64()?;
        let min = dec.f64()?;
        let max = dec.f64()?;
        let rng = SplitMix64(dec.u64()?);
        let nlev = dec.u32()? as usize;
        if nlev == 0 || nlev > 64 {
            return Err(Error::Codec(format!("bad KLL level count {nlev}")));
        }
        let mut levels = Vec::with_capacity(nlev);
        let mut weight = 0u64;
        for h in 0..nlev {
            let len = dec.u32()? as usize;
            if len * 8 > dec.remaining() {
                return Err(Error::Codec("KLL level exceeds input".into()));
            }
            let lvl = (0..len).map(|_| dec.f64()).collect::<Result<Vec<_>>>()?;
            weight += (lvl.len() as u64) << h;
            levels.push(lvl);
        }
        if weight != n {
            return Err(Error::Codec("KLL weights disagree with item count".into()));
        }
        let mut s = Self {
            k,
            levels,
            caps: Vec::new(),
            n,
            min,
            max,
            rng,
        };
        s.recompute_caps();
        Ok(s)
    }

    pub fn serialized_len(&self) -> usize {
        4 + 8 * 4 + 4 + self.levels.iter().map(|l| 4 + 8 * l.len()).sum::<usize>()
    }
}
