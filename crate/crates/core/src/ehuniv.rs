//! Distinct count, entropy, L1, L2 and top-k over any recent sub-window: an
//! exponential histogram in the squared-L2 regime whose buckets hold exact
//! frequency maps while small and universal sketches once a map outgrows the
//! sketch's own footprint.

use std::collections::BTreeMap;
use std::sync::Arc;

use rustc_hash::FxHashMap;

use crate::codec::{Decoder, Encoder};
use crate::eh::{EhWindow, Regime, Selection, Summary};
use crate::ehkll::WindowEstimate;
use crate::error::{Error, Result};
use crate::model::{SketchConfig, TimeWindow, Timestamp};
use crate::univ::{GSumStat, UnivSketch};

/// Serialized bytes of a frequency map: length prefix plus (token, count).
pub fn map_bytes(len: usize) -> usize {
    8 + 16 * len
}

#[derive(Debug, Clone)]
enum Body {
    Map { freq: FxHashMap<u64, u64>, l2sq: f64 },
    Sketch(Box<UnivSketch>),
}

/// Bucket payload: exact map or universal sketch.
#[derive(Debug, Clone)]
pub struct UnivPayload {
    config: Arc<SketchConfig>,
    body: Body,
}

impl UnivPayload {
    pub fn single(config: Arc<SketchConfig>, token: u64) -> Self {
        let mut freq = FxHashMap::default();
        freq.insert(token, 1);
        Self {
            config,
            body: Body::Map { freq, l2sq: 1.0 },
        }
    }

    pub fn is_map(&self) -> bool {
        matches!(self.body, Body::Map { .. })
    }

    pub fn map(&self) -> Option<&FxHashMap<u64, u64>> {
        match &self.body {
            Body::Map { freq, .. } => Some(freq),
            Body::Sketch(_) => None,
        }
    }

    pub fn sketch(&self) -> Option<&UnivSketch> {
        match &self.body {
            Body::Sketch(s) => Some(s),
            Body::Map { .. } => None,
        }
    }

    /// Add `count` occurrences of `token`.
    pub fn add(&mut self, token: u64, count: u64) {
        match &mut self.body {
            Body::Map { freq, l2sq } => {
                let f = freq.entry(token).or_default();
                *l2sq += (2 * *f * count + count * count) as f64;
                *f += count;
            }
            Body::Sketch(s) => {
                s.update(token, count);
            }
        }
        self.convert_if_large();
    }

    fn convert_if_large(&mut self) {
        let Body::Map { freq, .. } = &self.body else {
            return;
        };
        if map_bytes(freq.len()) as u64 <= self.config.map_threshold_bytes {
            return;
        }
        let mut sk = UnivSketch::new(&self.config);
        replay(&mut sk, freq);
        self.body = Body::Sketch(Box::new(sk));
    }
}

/// Weighted updates in token order so results do not depend on map layout.
fn replay(sk: &mut UnivSketch, freq: &FxHashMap<u64, u64>) {
    let mut items: Vec<(u64, u64)> = freq.iter().map(|(&t, &c)| (t, c)).collect();
    items.sort_unstable();
    for (t, c) in items {
        sk.update(t, c);
    }
}

impl Summary for UnivPayload {
    fn merge_from(&mut self, other: &Self) -> Result<()> {
        match (&mut self.body, &other.body) {
            (Body::Map { freq, l2sq }, Body::Map { freq: of, .. }) => {
                for (&t, &c) in of {
                    let f = freq.entry(t).or_default();
                    *l2sq += (2 * *f * c + c * c) as f64;
                    *f += c;
                }
                self.convert_if_large();
            }
            (Body::Map { freq, .. }, Body::Sketch(os)) => {
                let mut sk = os.clone();
                replay(&mut sk, freq);
                self.body = Body::Sketch(sk);
            }
            (Body::Sketch(s), Body::Map { freq, .. }) => replay(s, freq),
            (Body::Sketch(s), Body::Sketch(os)) => s.merge(os)?,
        }
        Ok(())
    }

    fn l2sq(&self) -> f64 {
        match &self.body {
            Body::Map { l2sq, .. } => *l2sq,
            Body::Sketch(s) => s.l2sq_running(),
        }
    }

    fn byte_size(&self) -> usize {
        match &self.body {
            Body::Map { freq, .. } => map_bytes(freq.len()),
            Body::Sketch(s) => s.serialized_len(),
        }
    }
}

/// Frequencies of a merged range: exact when every bucket was a map.
#[derive(Debug, Clone)]
pub enum Combined {
    Exact(FxHashMap<u64, u64>),
    Sketch(Box<UnivSketch>),
}

impl Combined {
    /// Merge payloads without converting: maps are summed into one map, which
    /// is then replayed into the merged sketch if any bucket was a sketch.
    pub fn from_payloads<'a>(parts: impl IntoIterator<Item = &'a UnivPayload>) -> Result<Self> {
        let mut maps: Vec<&FxHashMap<u64, u64>> = Vec::new();
        let mut sketches: Vec<&UnivSketch> = Vec::new();
        for p in parts {
            match &p.body {
                Body::Map { freq, .. } => maps.push(freq),
                Body::Sketch(s) => sketches.push(s),
            }
        }
        // start from a copy of the largest map; cloning beats re-inserting
        let largest = (0..maps.len()).max_by_key(|&i| maps[i].len());
        let mut freq = largest.map(|i| maps[i].clone()).unwrap_or_default();
        for (i, m) in maps.iter().enumerate() {
            if Some(i) == largest {
                continue;
            }
            for (&t, &c) in m.iter() {
                *freq.entry(t).or_default() += c;
            }
        }
        let Some((first, rest)) = sketches.split_first() else {
            return Ok(Combined::Exact(freq));
        };
        let mut sk = Box::new((*first).clone());
        sk.merge_many(rest.iter().copied())?;
        replay(&mut sk, &freq);
        Ok(Combined::Sketch(sk))
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, Combined::Exact(_))
    }

    pub fn stat(&self, stat: GSumStat) -> Result<f64> {
        match self {
            Combined::Exact(freq) => exact_stat(freq.values().copied(), stat),
            Combined::Sketch(sk) => match stat {
                // the merged count is exact
                GSumStat::L1 => Ok(sk.len() as f64),
                s => sk.gsum(s),
            },
        }
    }

    pub fn topk(&self, k: usize) -> Vec<(u64, f64)> {
        match self {
            Combined::Exact(freq) => {
                let mut all: Vec<(u64, u64)> = freq.iter().map(|(&t, &c)| (t, c)).collect();
                all.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                all.truncate(k);
                all.into_iter().map(|(t, c)| (t, c as f64)).collect()
            }
            Combined::Sketch(sk) => sk.topk(k),
        }
    }
}

/// Exact statistic over item frequencies.
///
/// Entropy groups items by frequency and sums classes in ascending
/// frequency, so the result does not depend on iteration order.
pub fn exact_stat(counts: impl IntoIterator<Item = u64>, stat: GSumStat) -> Result<f64> {
    let mut classes: BTreeMap<u64, u64> = BTreeMap::new();
    for c in counts.into_iter().filter(|&c| c > 0) {
        *classes.entry(c).or_default() += 1;
    }
    let n: u64 = classes.iter().map(|(f, m)| f * m).sum();
    if n == 0 {
        return Err(Error::EmptyRange);
    }
    Ok(match stat {
        GSumStat::L0 => classes.values().sum::<u64>() as f64,
        GSumStat::L1 => n as f64,
        GSumStat::L2 => {
            let s: f64 = classes.iter().map(|(&f, &m)| (m as f64) * (f as f64) * (f as f64)).sum();
            s.sqrt()
        }
        GSumStat::Entropy => {
            let nf = n as f64;
            let s: f64 = classes
                .iter()
                .map(|(&f, &m)| (m as f64) * (f as f64) * (f as f64).log2())
                .sum();
            (nf.log2() - s / nf).clamp(0.0, nf.log2())
        }
    })
}

#[derive(Debug, Clone)]
pub struct EhUniv {
    window: EhWindow<UnivPayload>,
    config: Arc<SketchConfig>,
}

impl EhUniv {
    pub fn new(config: &SketchConfig, span: i64) -> Result<Self> {
        config.validate()?;
        if span <= 0 {
            return Err(Error::InvalidConfig("window span must be positive".into()));
        }
        Ok(Self {
            window: EhWindow::new(config.k_eh, Regime::L2Sq, span),
            config: Arc::new(config.clone()),
        })
    }

    pub fn config(&self) -> &SketchConfig {
        &self.config
    }

    pub fn window(&self) -> &EhWindow<UnivPayload> {
        &self.window
    }

    pub fn set_span(&mut self, span: i64) {
        self.window.set_span(span);
    }

    pub fn insert(&mut self, t: Timestamp, token: u64) -> Result<()> {
        self.window
            .insert(t, UnivPayload::single(self.config.clone(), token))
    }

    pub fn expire(&mut self, now: Timestamp) {
        self.window.expire(now);
    }

    pub fn byte_size(&self) -> usize {
        self.window.byte_size()
    }

    /// Buckets in sketch form.
    pub fn sketch_buckets(&self) -> usize {
        self.window.buckets().iter().filter(|b| !b.summary.is_map()).count()
    }

    pub fn combined(&self, q: &TimeWindow) -> Result<(Combined, Selection)> {
        let sel = self.window.select(q)?;
        let parts = self.window.buckets().range(sel.range()).map(|b| &b.summary);
        Ok((Combined::from_payloads(parts)?, sel))
    }

    pub fn query(&self, q: &TimeWindow, stat: GSumStat) -> Result<WindowEstimate<f64>> {
        let (c, sel) = self.combined(q)?;
        let v = c.stat(stat)?;
        Ok(self.annotate(v, &sel))
    }

    pub fn topk(&self, q: &TimeWindow, k: usize) -> Result<WindowEstimate<Vec<(u64, f64)>>> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        let (c, sel) = self.combined(q)?;
        Ok(self.annotate(c.topk(k), &sel))
    }

    pub fn encode(&self, enc: &mut Encoder) {
        self.window.encode_with(enc, |p, e| match &p.body {
            Body::Map { freq, l2sq } => {
                let mut items: Vec<(u64, u64)> = freq.iter().map(|(&t, &c)| (t, c)).collect();
                items.sort_unstable();
                e.u8(0).f64(*l2sq).u64(items.len() as u64);
                for (t, c) in items {
                    e.u64(t).u64(c);
                }
            }
            Body::Sketch(sk) => {
                e.u8(1);
                sk.encode(e);
            }
        });
    }

    /// Payloads must have been written under `config`.
    pub fn decode(dec: &mut Decoder<'_>, config: &SketchConfig) -> Result<Self> {
        let config = Arc::new(config.clone());
        let reference = UnivSketch::new(&config);
        let window = EhWindow::decode_with(dec, |d| {
            let body = match d.u8()? {
                0 => {
                    let l2sq = d.f64()?;
                    let n = d.u64()? as usize;
                    if n > d.remaining() / 16 {
                        return Err(Error::Codec("map longer than input".into()));
                    }
                    let mut freq = FxHashMap::default();
                    freq.reserve(n);
                    for _ in 0..n {
                        freq.insert(d.u64()?, d.u64()?);
                    }
                    Body::Map { freq, l2sq }
                }
                1 => {
                    let sk = UnivSketch::decode(d)?;
                    reference.check_compatible(&sk)?;
                    Body::Sketch(Box::new(sk))
                }
                _ => return Err(Error::Codec("unknown payload tag".into())),
            };
            Ok(UnivPayload {
                config: config.clone(),
                body,
            })
        })?;
        if window.regime() != Regime::L2Sq {
            return Err(Error::Codec("gsum histogram must use the L2 regime".into()));
        }
        Ok(Self { window, config })
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::str_token;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(threshold: u64) -> Arc<SketchConfig> {
        let mut c = SketchConfig::gsum_default();
        c.univ_layers = 8;
        c.cs_cols_top = 256;
        c.cs_cols_bottom = 64;
        c.hh_capacity = 128;
        c.map_threshold_bytes = threshold;
        Arc::new(c)
    }

    #[test]
    fn three_inserts_same_token() {
        let mut e = EhUniv::new(&SketchConfig::gsum_default(), 1_000).unwrap();
        let a = str_token("a");
        for t in 0..3 {
            e.insert(t, a).unwrap();
        }
        let all = Combined::from_payloads(e.window().buckets().iter().map(|b| &b.summary)).unwrap();
        let Combined::Exact(m) = all else { panic!() };
        assert_eq!(m[&a], 3);
        let mut p = UnivPayload::single(small_cfg(1 << 20), a);
        p.add(a, 2);
        assert_eq!(p.l2sq(), 9.0);
        assert_eq!(p.map().unwrap()[&a], 3);
    }

    #[test]
    fn map_plus_map() {
        let c = small_cfg(1 << 20);
        let mut x = UnivPayload::single(c.clone(), 7);
        let mut y = UnivPayload::single(c, 7);
        y.add(7, 1);
        x.merge_from(&y).unwrap();
        assert_eq!(x.map().unwrap()[&7], 3);
        assert_eq!(x.l2sq(), 9.0);
    }

    #[test]
    fn map_plus_empty_sketch() {
        let c = small_cfg(1 << 20);
        let mut x = UnivPayload::single(c.clone(), 7);
        x.add(7, 2);
        let y = UnivPayload {
            config: c.clone(),
            body: Body::Sketch(Box::new(UnivSketch::new(&c))),
        };
        x.merge_from(&y).unwrap();
        assert_eq!(x.sketch().unwrap().estimate(7), 3.0);
    }

    #[test]
    fn conversion_keeps_estimates_near_exact() {
        let c = small_cfg(map_bytes(400) as u64);
        let mut p = UnivPayload::single(c.clone(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut truth: FxHashMap<u64, u64> = FxHashMap::default();
        truth.insert(0, 1);
        while p.is_map() {
            let t = (rng.random::<f64>().powi(4) * 2_000.0) as u64;
            p.add(t, 1);
            *truth.entry(t).or_default() += 1;
        }
        let sk = p.sketch().unwrap();
        let l2 = truth.values().map(|&f| (f * f) as f64).sum::<f64>().sqrt();
        // every token lives in one layer; bound by that layer's width
        let bound = 3.0 * l2 / (c.cs_cols_bottom as f64).sqrt();
        for (&t, &f) in &truth {
            assert!((sk.estimate(t) - f as f64).abs() <= bound, "token {t}");
        }
    }

    #[test]
    fn sketch_sum_is_associative() {
        let c = small_cfg(map_bytes(1) as u64);
        let mk = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = UnivPayload::single(c.clone(), 1);
            for _ in 0..500 {
                p.add(rng.random_range(0..300), 1);
            }
            assert!(!p.is_map());
            p
        };
        let (a, b, d) = (mk(1), mk(2), mk(3));
        let mut left = a.clone();
        left.merge_from(&b).unwrap();
        left.merge_from(&d).unwrap();
        let mut bc = b.clone();
        bc.merge_from(&d).unwrap();
        let mut right = a.clone();
        right.merge_from(&bc).unwrap();
        let (l, r) = (left.sketch().unwrap(), right.sketch().unwrap());
        for j in 0..l.num_layers() {
            assert_eq!(l.layer_sketch(j).counters(), r.layer_sketch(j).counters());
        }
    }

    #[test]
    fn all_map_exact_stats() {
        let mut e = EhUniv::new(&SketchConfig::gsum_default(), 1_000).unwrap();
        for (t, s) in ["a", "a", "b", "b"].iter().enumerate() {
            e.insert(t as i64 + 1, str_token(s)).unwrap();
        }
        let q = TimeWindow::new(0, 4).unwrap();
        assert_eq!(e.query(&q, GSumStat::Entropy).unwrap().value, 1.0);
        assert_eq!(e.query(&q, GSumStat::L0).unwrap().value, 2.0);
        assert_eq!(e.query(&q, GSumStat::L2).unwrap().value, 8f64.sqrt());
    }

    #[test]
    fn single_token_distinct() {
        let mut e = EhUniv::new(&SketchConfig::gsum_default(), 10_000).unwrap();
        for t in 1..=500 {
            e.insert(t, 42).unwrap();
        }
        let q = TimeWindow::new(0, 500).unwrap();
        assert_eq!(e.query(&q, GSumStat::L0).unwrap().value, 1.0);
    }

    #[test]
    fn exact_topk() {
        let mut e = EhUniv::new(&SketchConfig::gsum_default(), 1_000).unwrap();
        let (a, b) = (str_token("a"), str_token("b"));
        for (t, x) in [a, a, b].iter().enumerate() {
            e.insert(t as i64 + 1, *x).unwrap();
        }
        let q = TimeWindow::new(0, 3).unwrap();
        assert_eq!(e.topk(&q, 2).unwrap().value, vec![(a, 2.0), (b, 1.0)]);
        assert_eq!(e.topk(&q, 10).unwrap().value.len(), 2);
    }

    #[test]
    fn l2sq_invariants_with_sketch_buckets() {
        let c = small_cfg(map_bytes(200) as u64);
        let mut e = EhUniv::new(&c, 1_000_000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in 1..=20_000 {
            let tok = (rng.random::<f64>().powi(3) * 5_000.0) as u64;
            e.insert(t, tok).unwrap();
            e.window().l2sq_invariants(2.0).unwrap();
        }
        assert!(e.sketch_buckets() > 0);
        let q = TimeWindow::new(0, 20_000).unwrap();
        let l1 = e.query(&q, GSumStat::L1).unwrap().value;
        assert_eq!(l1, 20_000.0);
    }

    #[test]
    fn codec_roundtrip_mixed_payloads() {
        let c = small_cfg(map_bytes(100) as u64);
        let mut e = EhUniv::new(&c, 1_000_000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in 1..=5_000 {
            e.insert(t, rng.random_range(0..1_000)).unwrap();
        }
        assert!(e.sketch_buckets() > 0 && e.sketch_buckets() < e.window().len());
        let mut enc = Encoder::new();
        e.encode(&mut enc);
        let bytes = enc.into_bytes();
        let d = EhUniv::decode(&mut Decoder::new(&bytes), &c).unwrap();
        let q = TimeWindow::new(1_000, 5_000).unwrap();
        for st in GSumStat::ALL {
            assert_eq!(d.query(&q, st).unwrap(), e.query(&q, st).unwrap());
        }
        let other = (*c).clone().with_seed(99);
        assert!(EhUniv::decode(&mut Decoder::new(&bytes), &other).is_err());
    }

    #[test]
    fn entropy_bounded_by_log_distinct() {
        let mut c = SketchConfig::gsum_default();
        c.map_threshold_bytes = map_bytes(300) as u64;
        let mut e = EhUniv::new(&c, 1_000_000).unwrap();
        assert!(e.sketch_buckets() == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in 1..=30_000 {
            e.insert(t, rng.random_range(0..2_000)).unwrap();
        }
        for start in [0, 10_000, 20_000] {
            let q = TimeWindow::new(start, 30_000).unwrap();
            let h = e.query(&q, GSumStat::Entropy).unwrap().value;
            let l0 = e.query(&q, GSumStat::L0).unwrap().value;
            assert!(h >= 0.0 && h <= l0.log2() + 0.05, "h={h} l0={l0}");
        }
        assert!(e.sketch_buckets() > 0);
    }
}
