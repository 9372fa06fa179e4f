//! Universal sketch: a stack of progressively sub-sampled Count Sketches,
//! each paired with a heavy-hitter heap, answering any GSum statistic
//! (distinct count, total count, L2 norm, entropy) plus top-k from one
//! structure.
//!
//! An item is active in layer `j` when the first `j` per-layer sampling hashes
//! all test 1. Only its deepest active layer is updated. Queries rebuild the
//! heavy-hitter set of every layer's substream bottom-up and combine them with
//! the recursive estimator.

mod count_sketch;
mod heavy;

pub use count_sketch::CountSketch;
pub use heavy::HeavyHitters;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::hash::hash_u64;
use crate::model::SketchConfig;

/// Statistics answerable through a GSum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GSumStat {
    /// Number of distinct items.
    L0,
    /// Total item count.
    L1,
    /// Euclidean norm of the frequency vector.
    L2,
    /// Shannon entropy in bits of the empirical item distribution.
    Entropy,
}

impl GSumStat {
    pub const ALL: [GSumStat; 4] = [GSumStat::L0, GSumStat::L1, GSumStat::L2, GSumStat::Entropy];

    pub fn name(self) -> &'static str {
        match self {
            GSumStat::L0 => "distinct",
            GSumStat::L1 => "count",
            GSumStat::L2 => "l2",
            GSumStat::Entropy => "entropy",
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Weight {
    Linear,
    Square,
    XLogX,
}

impl Weight {
    #[inline]
    fn apply(self, f: f64) -> f64 {
        let f = f.max(0.0);
        match self {
            Weight::Linear => f,
            Weight::Square => f * f,
            Weight::XLogX => {
                if f > 1.0 {
                    f * f.log2()
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    cs: CountSketch,
    heap: HeavyHitters,
}

#[derive(Debug, Clone)]
pub struct UnivSketch {
    layers: Vec<Layer>,
    layer_seeds: Vec<u64>,
    rows: u32,
    seed: u64,
    n_total: u64,
    l2sq_running: f64,
}

const HEADER_LEN: usize = 4 * 3 + 8 * 3;
/// Candidates must out-estimate this share of a layer's counters.
const NOISE_QUANTILE: f64 = 0.99;

/// `sum over pool of (+g if the item's deepest layer is m, else -g)`.
fn correction(pool: &[(f64, u64, usize)], m: usize, g: impl Fn(f64) -> f64) -> f64 {
    pool.iter()
        .map(|&(e, _, layer)| if layer == m { g(e) } else { -g(e) })
        .sum()
}

impl UnivSketch {
    pub fn new(config: &SketchConfig) -> Self {
        let layers = (0..config.univ_layers)
            .map(|j| Layer {
                cs: CountSketch::new(
                    config.cs_rows,
                    config.cs_cols_for_layer(j),
                    hash_u64(0x1000 + j as u64, config.seed),
                ),
                heap: HeavyHitters::new(config.hh_capacity as usize),
            })
            .collect();
        let layer_seeds = (0..config.univ_layers)
            .map(|j| hash_u64(0x2000 + j as u64, config.seed))
            .collect();
        Self {
            layers,
            layer_seeds,
            rows: config.cs_rows,
            seed: config.seed,
            n_total: 0,
            l2sq_running: 0.0,
        }
    }

    /// Serialized size of an empty sketch under `config`: the footprint of
    /// the counters plus framing.
    pub fn serialized_len_for(config: &SketchConfig) -> usize {
        let counters: usize = (0..config.univ_layers)
            .map(|j| 9 + config.cs_rows as usize * config.cs_cols_for_layer(j) as usize * 8)
            .sum();
        HEADER_LEN + counters
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> u64 {
        self.n_total
    }

    pub fn is_empty(&self) -> bool {
        self.n_total == 0
    }

    /// Running estimate of the squared L2 norm, maintained per update.
    pub fn l2sq_running(&self) -> f64 {
        self.l2sq_running
    }

    pub fn layer_sketch(&self, j: usize) -> &CountSketch {
        &self.layers[j].cs
    }

    pub fn layer_heap(&self, j: usize) -> &HeavyHitters {
        &self.layers[j].heap
    }

    /// Deepest layer the token is sampled into.
    #[inline]
    pub fn deepest_layer(&self, token: u64) -> usize {
        let mut j = 0;
        while j + 1 < self.layers.len() && hash_u64(token, self.layer_seeds[j + 1]) & 1 == 1 {
            j += 1;
        }
        j
    }

    /// Add `weight` occurrences of `token`. Returns the frequency estimate
    /// before the update.
    pub fn update(&mut self, token: u64, weight: u64) -> f64 {
        debug_assert!(weight >= 1);
        let j = self.deepest_layer(token);
        let w = weight as i64;
        let layer = &mut self.layers[j];
        layer.cs.update(token, w);
        let after = layer.cs.estimate(token);
        // every row moves by exactly `w`, so the median does too
        let before = after - w as f64;
        layer.heap.offer(token, after);
        self.n_total += weight;
        let wf = weight as f64;
        self.l2sq_running += 2.0 * wf * before.max(0.0) + wf * wf;
        before
    }

    /// Frequency estimate from the token's own layer.
    pub fn estimate(&self, token: u64) -> f64 {
        self.layers[self.deepest_layer(token)].cs.estimate(token)
    }

    pub fn check_compatible(&self, other: &UnivSketch) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self.rows != other.rows
            || self.seed != other.seed
        {
            return Err(Error::MismatchedConfig("universal sketch shapes differ"));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            a.cs.check_compatible(&b.cs)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &UnivSketch) -> Result<()> {
        self.merge_many(std::iter::once(other))
    }

    /// Add all counters, then rebuild every heap once from the union of
    /// candidates re-estimated on the merged counters.
    pub fn merge_many<'a, I>(&mut self, others: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a UnivSketch>,
    {
        let others: Vec<&UnivSketch> = others.into_iter().collect();
        for o in &others {
            self.check_compatible(o)?;
        }
        if others.is_empty() {
            return Ok(());
        }
        for (j, layer) in self.layers.iter_mut().enumerate() {
            let mut candidates: Vec<u64> = layer.heap.iter().map(|(t, _)| t).collect();
            for o in &others {
                layer.cs.merge(&o.layers[j].cs)?;
                candidates.extend(o.layers[j].heap.iter().map(|(t, _)| t));
            }
            let was_full = !layer.heap.is_complete()
                || others.iter().any(|o| !o.layers[j].heap.is_complete());
            candidates.sort_unstable();
            candidates.dedup();
            layer.heap.clear();
            for t in candidates {
                layer.heap.offer(t, layer.cs.estimate(t));
            }
            if was_full {
                layer.heap.set_overflowed(true);
            }
        }
        // ||a + b||^2 lies between the sum of the parts' norms and
        // (number of parts) times that sum; inside it, trust the counters
        let mut parts = self.l2sq_running;
        for o in &others {
            self.n_total += o.n_total;
            parts += o.l2sq_running;
        }
        let upper = parts * (others.len() + 1) as f64;
        self.l2sq_running = self.counter_l2sq().clamp(parts, upper);
        Ok(())
    }

    /// Squared L2 norm read off the counters: per row, the squared counters
    /// summed over all layers, then the median across rows.
    fn counter_l2sq(&self) -> f64 {
        let mut rows = vec![0.0; self.rows as usize];
        for layer in &self.layers {
            for (acc, v) in rows.iter_mut().zip(layer.cs.row_square_sums()) {
                *acc += v;
            }
        }
        rows.sort_unstable_by(f64::total_cmp);
        let n = rows.len();
        if n % 2 == 1 {
            rows[n / 2]
        } else {
            (rows[n / 2 - 1] + rows[n / 2]) / 2.0
        }
    }

    /// Recursive GSum with weight `g`, evaluated bottom-up.
    ///
    /// The heavy-hitter set of layer `m`'s substream is drawn from the set of
    /// layer `m + 1` plus the candidates tracked at layer `m`. A candidate
    /// qualifies when its estimate clears a threshold set at a high quantile
    /// of the layer's absolute counters, so items whose estimate is mostly
    /// collision noise are left to the sampled layers below. The same
    /// threshold applies to candidates carried up from deeper layers. Layers
    /// whose heap holds every item it was offered skip the threshold.
    fn gsum_with(&self, g: Weight) -> f64 {
        let cap = self.layers[0].heap.capacity().max(1);
        // (estimate, token, deepest layer)
        let mut pool: Vec<(f64, u64, usize)> = Vec::new();
        let mut y = 0.0;
        for m in (0..self.layers.len()).rev() {
            let layer = &self.layers[m];
            // a heap that never turned anyone away holds its whole substream
            // unselected, so its estimates carry no selection bias
            let floor = if layer.heap.is_complete() {
                f64::NEG_INFINITY
            } else {
                layer.cs.abs_counter_quantile(NOISE_QUANTILE).max(0.5)
            };
            pool.retain(|c| c.0 >= floor);
            pool.extend(
                layer
                    .heap
                    .iter()
                    // stored estimates are stale; re-read from the counters
                    .map(|(t, _)| (layer.cs.estimate(t), t, m))
                    .filter(|c| c.0 >= floor),
            );
            if pool.len() > cap {
                pool.select_nth_unstable_by(cap - 1, |a, b| {
                    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
                });
                pool.truncate(cap);
            }
            y = 2.0 * y + correction(&pool, m, |e| g.apply(e));
        }
        y
    }

    /// Distinct count. Every tracked token was inserted, so at any layer
    /// whose heap (and every deeper heap) never turned a candidate away the
    /// substream is known exactly; above the shallowest such layer the
    /// recursion falls back to pure sampling.
    fn distinct(&self) -> f64 {
        let mut y = 0.0;
        let mut complete = true;
        let mut pool: Vec<(f64, u64, usize)> = Vec::new();
        for m in (0..self.layers.len()).rev() {
            let heap = &self.layers[m].heap;
            complete &= heap.is_complete();
            if complete {
                pool.extend(heap.iter().map(|(t, _)| (1.0, t, m)));
                y = 2.0 * y + correction(&pool, m, |_| 1.0);
            } else {
                y *= 2.0;
            }
        }
        y
    }

    pub fn gsum(&self, stat: GSumStat) -> Result<f64> {
        Ok(match stat {
            GSumStat::L0 => self.distinct(),
            GSumStat::L1 => self.gsum_with(Weight::Linear).max(0.0),
            GSumStat::L2 => self.gsum_with(Weight::Square).max(0.0).sqrt(),
            GSumStat::Entropy => {
                if self.n_total == 0 {
                    return Err(Error::EmptySketch);
                }
                let n = self.n_total as f64;
                let s = self.gsum_with(Weight::XLogX);
                (n.log2() - s / n).clamp(0.0, n.log2())
            }
        })
    }

    /// Highest-estimate tracked items, descending. Ties break on token.
    pub fn topk(&self, k: usize) -> Vec<(u64, f64)> {
        let mut all: Vec<(u64, f64)> = self
            .layers
            .iter()
            .flat_map(|l| l.heap.iter())
            .filter(|&(_, e)| e > 0.0)
            .collect();
        all.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.layers.len() as u32)
            .u32(self.rows)
            .u32(self.layers[0].heap.capacity() as u32)
            .u64(self.seed)
            .u64(self.n_total)
            .f64(self.l2sq_running);
        for l in &self.layers {
            enc.u32(l.cs.cols());
            l.cs.encode_counters(enc);
            enc.u8(l.heap.is_complete() as u8);
            enc.u32(l.heap.len() as u32);
            for (t, e) in l.heap.iter() {
                enc.u64(t).f64(e);
            }
        }
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let layers = dec.u32()?;
        let rows = dec.u32()?;
        let hh = dec.u32()?;
        let seed = dec.u64()?;
        if layers == 0 || layers > 64 || rows == 0 || rows > 64 {
            return Err(Error::Codec("bad universal sketch header".into()));
        }
        let n_total = dec.u64()?;
        let l2sq_running = dec.f64()?;
        let mut out = Self {
            layers: Vec::with_capacity(layers as usize),
            layer_seeds: (0..layers)
                .map(|j| hash_u64(0x2000 + j as u64, seed))
                .collect(),
            rows,
            seed,
            n_total,
            l2sq_running,
        };
        for j in 0..layers {
            let cols = dec.u32()?;
            if !cols.is_power_of_two() || (rows as usize * cols as usize * 8) > dec.remaining() {
                return Err(Error::Codec("bad Count-Sketch width".into()));
            }
            let mut cs = CountSketch::new(rows, cols, hash_u64(0x1000 + j as u64, seed));
            cs.decode_counters(dec)?;
            let complete = dec.u8()? == 1;
            let len = dec.u32()? as usize;
            if len > hh as usize {
                return Err(Error::Codec("heap larger than its capacity".into()));
            }
            let mut heap = HeavyHitters::new(hh as usize);
            for _ in 0..len {
                let t = dec.u64()?;
                heap.offer(t, dec.f64()?);
            }
            heap.set_overflowed(!complete);
            out.layers.push(Layer { cs, heap });
        }
        Ok(out)
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_LEN
            + self
                .layers
                .iter()
                .map(|l| 9 + l.cs.counters().len() * 8 + l.heap.len() * 16)
                .sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Zipf};
    use std::collections::HashMap;

    fn cfg() -> SketchConfig {
        SketchConfig::gsum_default()
    }

    fn build(stream: &[u64]) -> UnivSketch {
        let mut u = UnivSketch::new(&cfg());
        for &t in stream {
            u.update(t, 1);
        }
        u
    }

    #[test]
    fn single_item_stream() {
        let u = build(&[7, 7, 7]);
        assert_eq!(u.gsum(GSumStat::L0).unwrap(), 1.0);
        assert_eq!(u.gsum(GSumStat::L1).unwrap(), 3.0);
        assert_eq!(u.gsum(GSumStat::L2).unwrap(), 3.0);
        assert_eq!(u.gsum(GSumStat::Entropy).unwrap(), 0.0);
        assert_eq!(u.topk(5), vec![(7, 3.0)]);
    }

    #[test]
    fn two_equiprobable_items() {
        let u = build(&[1, 1, 2, 2]);
        assert!((u.gsum(GSumStat::Entropy).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_update() {
        let mut u = UnivSketch::new(&cfg());
        u.update(99, 5);
        assert_eq!(u.estimate(99), 5.0);
        assert_eq!(u.len(), 5);
        assert_eq!(u.l2sq_running(), 25.0);
    }

    #[test]
    fn three_four_five() {
        let mut a = UnivSketch::new(&cfg());
        let mut b = UnivSketch::new(&cfg());
        a.update(1, 3);
        b.update(2, 4);
        a.merge(&b).unwrap();
        assert!((a.gsum(GSumStat::L2).unwrap() - 5.0).abs() < 1e-9);
        assert_eq!(a.topk(1), vec![(2, 4.0)]);
        assert_eq!(a.topk(10).len(), 2);
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let u = build(&[1, 2, 2, 3, 3, 3]);
        let mut e = UnivSketch::new(&cfg());
        e.merge(&u).unwrap();
        for s in GSumStat::ALL {
            assert_eq!(e.gsum(s).unwrap(), u.gsum(s).unwrap());
        }
    }

    #[test]
    fn mismatched_seed_rejected() {
        let mut a = UnivSketch::new(&cfg());
        let b = UnivSketch::new(&cfg().with_seed(1));
        assert!(matches!(a.merge(&b), Err(Error::MismatchedConfig(_))));
    }

    #[test]
    fn entropy_of_empty_sketch_fails() {
        let u = UnivSketch::new(&cfg());
        assert!(matches!(u.gsum(GSumStat::Entropy), Err(Error::EmptySketch)));
        assert_eq!(u.gsum(GSumStat::L0).unwrap(), 0.0);
    }

    fn zipf_stream(n: usize, seed: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Zipf::new(100_001.0, 1.01).unwrap();
        (0..n).map(|_| z.sample(&mut rng) as u64).collect()
    }

    #[test]
    fn layer_occupancy_halves() {
        let u = UnivSketch::new(&cfg());
        let stream = zipf_stream(1_000_000, 3);
        let mut distinct: Vec<u64> = stream.clone();
        distinct.sort_unstable();
        distinct.dedup();
        // items reaching layer j: binomial(n, 2^-j)
        let mut reach = vec![0u64; u.num_layers()];
        for &t in &distinct {
            for r in reach.iter_mut().take(u.deepest_layer(t) + 1) {
                *r += 1;
            }
        }
        let n = distinct.len() as f64;
        for (j, &r) in reach.iter().enumerate().take(10) {
            let p = 0.5f64.powi(j as i32);
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!((r as f64 - n * p).abs() <= 3.0 * sd + 1e-9, "layer {j}: {r} vs {}", n * p);
        }
    }

    #[test]
    fn merge_of_halves_is_bit_identical() {
        let stream = zipf_stream(200_000, 5);
        let whole = build(&stream);
        let mut a = build(&stream[..77_777]);
        let b = build(&stream[77_777..]);
        a.merge(&b).unwrap();
        for j in 0..whole.num_layers() {
            assert_eq!(a.layer_sketch(j).counters(), whole.layer_sketch(j).counters());
        }
        assert_eq!(a.len(), whole.len());
    }

    #[test]
    fn zipf_accuracy_against_frequency_table() {
        let stream = zipf_stream(1_000_000, 11);
        let u = build(&stream);
        let mut freq: HashMap<u64, u64> = HashMap::new();
        for &t in &stream {
            *freq.entry(t).or_default() += 1;
        }
        let n = stream.len() as f64;
        let l0 = freq.len() as f64;
        let l2 = freq.values().map(|&f| (f * f) as f64).sum::<f64>().sqrt();
        let h = n.log2() - freq.values().map(|&f| f as f64 * (f as f64).log2()).sum::<f64>() / n;
        let rel = |e: f64, t: f64| (e - t).abs() / t;
        assert!(rel(u.gsum(GSumStat::L0).unwrap(), l0) < 0.1);
        assert!(rel(u.gsum(GSumStat::L2).unwrap(), l2) < 0.05);
        assert!(rel(u.gsum(GSumStat::Entropy).unwrap(), h) < 0.05);
        assert!(rel(u.gsum(GSumStat::L1).unwrap(), n) < 0.1);
        let ent = u.gsum(GSumStat::Entropy).unwrap();
        assert!(ent >= 0.0 && ent <= l0.log2());
    }

    #[test]
    fn l1_exact_when_every_item_tracked() {
        let mut stream = Vec::new();
        for t in 0..30u64 {
            stream.extend(std::iter::repeat(t).take(1 + (t % 7) as usize));
        }
        let u = build(&stream);
        assert_eq!(u.gsum(GSumStat::L1).unwrap(), stream.len() as f64);
        assert_eq!(u.gsum(GSumStat::L0).unwrap(), 30.0);
    }

    #[test]
    fn deterministic() {
        let s = zipf_stream(50_000, 9);
        let (a, b) = (build(&s), build(&s));
        for st in GSumStat::ALL {
            assert_eq!(a.gsum(st).unwrap(), b.gsum(st).unwrap());
        }
        assert_eq!(a.topk(20), b.topk(20));
    }

    #[test]
    fn topk_recall_on_zipf() {
        let stream = zipf_stream(1_000_000, 4);
        let u = build(&stream);
        let mut freq: HashMap<u64, u64> = HashMap::new();
        for &t in &stream {
            *freq.entry(t).or_default() += 1;
        }
        let mut exact: Vec<(u64, u64)> = freq.into_iter().collect();
        exact.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let truth: Vec<u64> = exact.iter().take(20).map(|x| x.0).collect();
        let got: Vec<u64> = u.topk(20).into_iter().map(|x| x.0).collect();
        let hit = got.iter().filter(|t| truth.contains(t)).count();
        assert!(hit >= 19, "recall {hit}/20");
    }

    #[test]
    fn codec_roundtrip() {
        let u = build(&zipf_stream(10_000, 2));
        let mut enc = Encoder::new();
        u.encode(&mut enc);
        assert_eq!(enc.len(), u.serialized_len());
        let bytes = enc.into_bytes();
        let v = UnivSketch::decode(&mut Decoder::new(&bytes)).unwrap();
        for s in GSumStat::ALL {
            assert_eq!(v.gsum(s).unwrap(), u.gsum(s).unwrap());
        }
        assert!(UnivSketch::decode(&mut Decoder::new(&bytes[..100])).is_err());
    }

    #[test]
    fn serialized_len_for_matches_empty() {
        let c = cfg();
        let u = UnivSketch::new(&c);
        assert_eq!(u.serialized_len(), UnivSketch::serialized_len_for(&c));
    }
}
