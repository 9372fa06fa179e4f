//! Registry of per-(series, family) sketch instances driven by rules.
//!
//! Rules name a selector and a window; every series matching a rule gets one
//! instance per function family, sized to the largest window among the rules
//! referring to it. Instances are created when a rule is registered (for
//! series already seen) or when a matching series first shows up.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::ehkll::EhKll;
use crate::ehuniv::EhUniv;
use crate::error::{Error, Result};
use crate::hash::hash_u64;
use crate::model::{DataSample, SampleValue, SeriesId, SketchConfig, TimeWindow, Timestamp};
use crate::query::{parse, Family, QueryExpr, Selector};
use crate::sampler::SampleWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Record,
    Alert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

impl CmpOp {
    pub fn holds(self, a: f64, b: f64) -> bool {
        match self {
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertCondition {
    pub op: CmpOp,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub id: String,
    pub kind: RuleKind,
    /// Milliseconds between evaluations.
    pub eval_interval_ms: i64,
    pub expr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<AlertCondition>,
}

impl RuleSpec {
    pub fn validate(&self) -> Result<QueryExpr> {
        if self.id.is_empty() {
            return Err(Error::InvalidConfig("rule id must not be empty".into()));
        }
        if self.eval_interval_ms <= 0 {
            return Err(Error::InvalidConfig("eval_interval_ms must be positive".into()));
        }
        parse(&self.expr)
    }
}

/// Why a lookup could not be served from the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Miss {
    NoInstance,
    WindowTooOld,
    ColdStart,
}

#[derive(Debug)]
pub enum Payload {
    Quantile(EhKll),
    GSum(EhUniv),
    Sample(SampleWindow),
}

impl Payload {
    fn new(family: Family, cfg: &SketchConfig, span: i64) -> Result<Self> {
        Ok(match family {
            Family::Quantile => Payload::Quantile(EhKll::new(cfg, span)?),
            Family::GSum => Payload::GSum(EhUniv::new(cfg, span)?),
            Family::Sample => Payload::Sample(SampleWindow::new(cfg.sample_prob, span, cfg.seed)?),
        })
    }

    fn set_span(&mut self, span: i64) {
        match self {
            Payload::Quantile(p) => p.set_span(span),
            Payload::GSum(p) => p.set_span(span),
            Payload::Sample(p) => p.set_span(span),
        }
    }

    pub fn byte_size(&self) -> usize {
        match self {
            Payload::Quantile(p) => p.byte_size(),
            Payload::GSum(p) => p.byte_size(),
            Payload::Sample(p) => p.byte_size(),
        }
    }

    /// Buckets (or retained samples for the sampler).
    pub fn unit_count(&self) -> usize {
        match self {
            Payload::Quantile(p) => p.window().len(),
            Payload::GSum(p) => p.window().len(),
            Payload::Sample(p) => p.len(),
        }
    }

    fn encode(&self, enc: &mut Encoder) {
        match self {
            Payload::Quantile(p) => p.encode(enc),
            Payload::GSum(p) => p.encode(enc),
            Payload::Sample(p) => p.encode(enc),
        }
    }

    fn decode(family: Family, dec: &mut Decoder<'_>, cfg: &SketchConfig) -> Result<Self> {
        Ok(match family {
            Family::Quantile => Payload::Quantile(EhKll::decode(dec)?),
            Family::GSum => Payload::GSum(EhUniv::decode(dec, cfg)?),
            Family::Sample => Payload::Sample(SampleWindow::decode(dec)?),
        })
    }
}

/// String items seen by a frequency instance, so top-k answers can show
/// them. Cleared when it grows past its cap.
const NAME_CAP: usize = 1 << 20;

#[derive(Debug)]
pub struct CacheInstance {
    series: SeriesId,
    family: Family,
    max_window: i64,
    payload: Payload,
    first_ts: Option<Timestamp>,
    last_ts: Option<Timestamp>,
    /// rule id -> window that rule needs
    ref_rules: BTreeMap<String, i64>,
    rejected: u64,
    names: FxHashMap<u64, Arc<str>>,
    last_used: AtomicU64,
}

impl CacheInstance {
    pub fn series(&self) -> &SeriesId {
        &self.series
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn max_window(&self) -> i64 {
        self.max_window
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn first_ts(&self) -> Option<Timestamp> {
        self.first_ts
    }

    pub fn last_ts(&self) -> Option<Timestamp> {
        self.last_ts
    }

    pub fn rule_ids(&self) -> impl Iterator<Item = &str> {
        self.ref_rules.keys().map(String::as_str)
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn byte_size(&self) -> usize {
        self.payload.byte_size()
    }

    /// Display value of a token seen by this instance.
    pub fn item_of(&self, token: u64) -> SampleValue {
        match self.names.get(&token) {
            Some(s) => SampleValue::Str(s.to_string()),
            None => SampleValue::Float(f64::from_bits(token)),
        }
    }

    fn insert(&mut self, t: Timestamp, v: &SampleValue) -> Result<()> {
        match self.last_ts {
            Some(last) if t < last => return Err(Error::OutOfOrder { ts: t, newest: last }),
            Some(last) if t == last => return Err(Error::Duplicate(t)),
            _ => {}
        }
        match (&mut self.payload, v) {
            (Payload::Quantile(p), SampleValue::Float(x)) => p.insert(t, *x)?,
            (Payload::Sample(p), SampleValue::Float(x)) => p.insert(t, *x)?,
            (Payload::Quantile(_), _) => return Err(Error::NotNumeric { func: "quantile" }),
            (Payload::Sample(_), _) => return Err(Error::NotNumeric { func: "sample" }),
            (Payload::GSum(p), v) => {
                let tok = v.token();
                if let SampleValue::Str(s) = v {
                    if self.names.len() >= NAME_CAP {
                        self.names.clear();
                    }
                    self.names.entry(tok).or_insert_with(|| s.as_str().into());
                }
                p.insert(t, tok)?;
            }
        }
        self.first_ts.get_or_insert(t);
        self.last_ts = Some(t);
        Ok(())
    }

    /// Window the caller may query given this instance's history: the end is
    /// clamped to the newest sample.
    fn serve(&self, q: &TimeWindow) -> std::result::Result<TimeWindow, Miss> {
        let (Some(first), Some(last)) = (self.first_ts, self.last_ts) else {
            return Err(Miss::ColdStart);
        };
        if q.start < last - self.max_window {
            return Err(Miss::WindowTooOld);
        }
        // (start, end] holds no unseen integer timestamps when start == first - 1
        if q.start < first - 1 {
            return Err(Miss::ColdStart);
        }
        Ok(TimeWindow {
            start: q.start,
            end: q.end.min(last).max(q.start + 1),
        })
    }
}

pub type InstanceHandle = Arc<RwLock<CacheInstance>>;

/// A served lookup: the instance and the window to ask it for.
pub struct Hit {
    pub instance: InstanceHandle,
    pub window: TimeWindow,
}

/// Sketch parameters per family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    pub quantile: SketchConfig,
    pub gsum: SketchConfig,
    pub sample: SketchConfig,
    /// Instances allowed to hold data at once; the least recently used one
    /// is reset beyond this. Off when `None`.
    pub max_live_instances: Option<usize>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            quantile: SketchConfig::quantile_default(),
            gsum: SketchConfig::gsum_default(),
            sample: SketchConfig::sample_default(),
            max_live_instances: None,
        }
    }
}

impl CacheConfig {
    pub fn for_family(&self, f: Family) -> &SketchConfig {
        match f {
            Family::Quantile => &self.quantile,
            Family::GSum => &self.gsum,
            Family::Sample => &self.sample,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for f in Family::ALL {
            self.for_family(f).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug)]
struct RuleEntry {
    spec: RuleSpec,
    expr: QueryExpr,
}

#[derive(Debug, Default)]
struct Registry {
    rules: BTreeMap<String, RuleEntry>,
    instances: FxHashMap<(SeriesId, Family), InstanceHandle>,
    by_series: FxHashMap<SeriesId, Vec<InstanceHandle>>,
    known: FxHashSet<SeriesId>,
}

/// Counters reported by [`SketchCache::stats`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct CacheStats {
    pub instances: usize,
    pub rules: usize,
    pub bytes: usize,
    pub hits: u64,
    pub misses: BTreeMap<String, u64>,
    pub rejected: u64,
    pub per_instance: Vec<InstanceStats>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceStats {
    pub series: String,
    pub family: Family,
    pub max_window_ms: i64,
    pub bytes: usize,
    pub buckets: usize,
    pub rules: Vec<String>,
}

#[derive(Debug)]
pub struct SketchCache {
    config: CacheConfig,
    reg: RwLock<Registry>,
    hits: AtomicU64,
    misses: [AtomicU64; 3],
    tick: AtomicU64,
}

impl SketchCache {
    pub fn new(config: CacheConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            reg: RwLock::new(Registry::default()),
            hits: AtomicU64::new(0),
            misses: Default::default(),
            tick: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    fn make_instance(&self, series: &SeriesId, family: Family, window: i64) -> Result<CacheInstance> {
        let mut cfg = self.config.for_family(family).clone();
        cfg.seed = hash_u64(series.canonical_id() ^ family as u64, cfg.seed);
        Ok(CacheInstance {
            series: series.clone(),
            family,
            max_window: window,
            payload: Payload::new(family, &cfg, window)?,
            first_ts: None,
            last_ts: None,
            ref_rules: BTreeMap::new(),
            rejected: 0,
            names: FxHashMap::default(),
            last_used: AtomicU64::new(0),
        })
    }

    fn attach(&self, reg: &mut Registry, series: &SeriesId, family: Family, rule: &str, window: i64) -> Result<()> {
        let key = (series.clone(), family);
        let handle = match reg.instances.get(&key) {
            Some(h) => h.clone(),
            None => {
                let h = Arc::new(RwLock::new(self.make_instance(series, family, window)?));
                reg.instances.insert(key, h.clone());
                reg.by_series.entry(series.clone()).or_default().push(h.clone());
                h
            }
        };
        let mut inst = handle.write();
        inst.ref_rules.insert(rule.to_owned(), window);
        let span = inst.ref_rules.values().copied().max().unwrap_or(window);
        if span != inst.max_window {
            inst.max_window = span;
            inst.payload.set_span(span);
        }
        Ok(())
    }

    /// Register a rule; returns the (series, family) pairs it now covers.
    /// Re-registering an identical rule is a no-op; a changed rule with the
    /// same id replaces the old one.
    pub fn register_rule(&self, spec: RuleSpec) -> Result<Vec<(SeriesId, Family)>> {
        let expr = spec.validate()?;
        let mut reg = self.reg.write();
        let mut orphans = Vec::new();
        if let Some(old) = reg.rules.get(&spec.id) {
            if old.spec != spec {
                orphans = Self::release(&mut reg, &spec.id);
            }
        }
        let family = expr.func.family();
        let window = expr.lookback();
        let matching: Vec<SeriesId> = reg
            .known
            .iter()
            .filter(|s| expr.selector.matches(s))
            .cloned()
            .collect();
        for s in &matching {
            self.attach(&mut reg, s, family, &spec.id, window)?;
        }
        reg.rules.insert(spec.id.clone(), RuleEntry { spec, expr });
        // instances the new version still covers keep their data
        Self::prune(&mut reg, orphans);
        let mut out: Vec<(SeriesId, Family)> = matching.into_iter().map(|s| (s, family)).collect();
        out.sort_by_cached_key(|(s, _)| s.to_string());
        Ok(out)
    }

    /// Remove a rule; returns how many instances were destroyed.
    pub fn unregister_rule(&self, id: &str) -> Result<usize> {
        let mut reg = self.reg.write();
        if !reg.rules.contains_key(id) {
            return Err(Error::UnknownRule(id.to_owned()));
        }
        Ok(Self::detach(&mut reg, id))
    }

    fn detach(reg: &mut Registry, id: &str) -> usize {
        let orphans = Self::release(reg, id);
        Self::prune(reg, orphans)
    }

    /// Drop the rule and its references; returns instances left unreferenced.
    fn release(reg: &mut Registry, id: &str) -> Vec<(SeriesId, Family)> {
        reg.rules.remove(id);
        let mut dead: Vec<(SeriesId, Family)> = Vec::new();
        for (key, h) in &reg.instances {
            let mut inst = h.write();
            if inst.ref_rules.remove(id).is_none() {
                continue;
            }
            match inst.ref_rules.values().max() {
                None => dead.push(key.clone()),
                Some(&w) => {
                    // future expiry only; retained buckets stay until then
                    inst.max_window = w;
                    inst.payload.set_span(w);
                }
            }
        }
        dead
    }

    fn prune(reg: &mut Registry, candidates: Vec<(SeriesId, Family)>) -> usize {
        let mut dead = 0;
        for key in &candidates {
            let unused = reg.instances.get(key).is_some_and(|h| h.read().ref_rules.is_empty());
            if !unused {
                continue;
            }
            if let Some(h) = reg.instances.remove(key) {
                dead += 1;
                if let Some(v) = reg.by_series.get_mut(&key.0) {
                    v.retain(|x| !Arc::ptr_eq(x, &h));
                    if v.is_empty() {
                        reg.by_series.remove(&key.0);
                    }
                }
            }
        }
        dead
    }

    pub fn rules(&self) -> Vec<RuleSpec> {
        self.reg.read().rules.values().map(|r| r.spec.clone()).collect()
    }

    pub fn rule(&self, id: &str) -> Option<(RuleSpec, QueryExpr)> {
        self.reg
            .read()
            .rules
            .get(id)
            .map(|r| (r.spec.clone(), r.expr.clone()))
    }

    fn handles_for(&self, series: &SeriesId) -> Result<Vec<InstanceHandle>> {
        {
            let reg = self.reg.read();
            if reg.known.contains(series) {
                return Ok(reg.by_series.get(series).cloned().unwrap_or_default());
            }
        }
        let mut reg = self.reg.write();
        if reg.known.insert(series.clone()) {
            let hits: Vec<(String, Family, i64)> = reg
                .rules
                .values()
                .filter(|r| r.expr.selector.matches(series))
                .map(|r| (r.spec.id.clone(), r.expr.func.family(), r.expr.lookback()))
                .collect();
            for (id, fam, w) in hits {
                self.attach(&mut reg, series, fam, &id, w)?;
            }
        }
        Ok(reg.by_series.get(series).cloned().unwrap_or_default())
    }

    /// Feed one sample to every instance of its series. Returns how many
    /// instances took it and how many rejected it; rejections are
    /// independent per instance.
    pub fn ingest(&self, s: &DataSample) -> Result<(usize, usize)> {
        let handles = self.handles_for(&s.series)?;
        let (mut ok, mut bad) = (0, 0);
        for h in &handles {
            let mut inst = h.write();
            match inst.insert(s.timestamp, &s.value) {
                Ok(()) => ok += 1,
                Err(_) => {
                    inst.rejected += 1;
                    bad += 1;
                }
            }
            inst.last_used.store(self.tick.fetch_add(1, Ordering::Relaxed), Ordering::Relaxed);
        }
        if ok > 0 {
            self.enforce_cap();
        }
        Ok((ok, bad))
    }

    fn enforce_cap(&self) {
        let Some(cap) = self.config.max_live_instances else {
            return;
        };
        let reg = self.reg.read();
        let live: Vec<&InstanceHandle> = reg
            .instances
            .values()
            .filter(|h| h.read().last_ts.is_some())
            .collect();
        if live.len() <= cap {
            return;
        }
        let mut by_age: Vec<(u64, &InstanceHandle)> = live
            .into_iter()
            .map(|h| (h.read().last_used.load(Ordering::Relaxed), h))
            .collect();
        by_age.sort_by_key(|x| x.0);
        let excess = by_age.len() - cap;
        for (_, h) in by_age.into_iter().take(excess) {
            let mut inst = h.write();
            let fresh = self.make_instance(&inst.series, inst.family, inst.max_window);
            if let Ok(fresh) = fresh {
                inst.payload = fresh.payload;
                inst.first_ts = None;
                inst.last_ts = None;
                inst.names.clear();
            }
        }
    }

    /// Find the instance serving `(series, family)` over `q`.
    pub fn lookup(&self, series: &SeriesId, family: Family, q: &TimeWindow) -> std::result::Result<Hit, Miss> {
        let handle = self.reg.read().instances.get(&(series.clone(), family)).cloned();
        let res = match handle {
            None => Err(Miss::NoInstance),
            Some(h) => {
                let served = {
                    let inst = h.read();
                    inst.last_used.store(self.tick.fetch_add(1, Ordering::Relaxed), Ordering::Relaxed);
                    inst.serve(q)
                };
                served.map(|window| Hit { instance: h, window })
            }
        };
        match &res {
            Ok(_) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
            }
            Err(m) => {
                self.misses[*m as usize].fetch_add(1, Ordering::Relaxed);
            }
        }
        res
    }

    pub fn instance(&self, series: &SeriesId, family: Family) -> Option<InstanceHandle> {
        self.reg.read().instances.get(&(series.clone(), family)).cloned()
    }

    /// Series with an instance of `family` matching `sel`.
    pub fn select(&self, sel: &Selector, family: Family) -> Vec<SeriesId> {
        self.reg
            .read()
            .instances
            .keys()
            .filter(|(s, f)| *f == family && sel.matches(s))
            .map(|(s, _)| s.clone())
            .collect()
    }

    pub fn instance_count(&self) -> usize {
        self.reg.read().instances.len()
    }

    pub fn bytes(&self) -> usize {
        self.reg.read().instances.values().map(|h| h.read().byte_size()).sum()
    }

    /// Largest window over all registered rules.
    pub fn max_rule_window(&self) -> i64 {
        self.reg
            .read()
            .rules
            .values()
            .map(|r| r.expr.lookback())
            .max()
            .unwrap_or(0)
    }

    pub fn stats(&self) -> CacheStats {
        let reg = self.reg.read();
        let mut per_instance: Vec<InstanceStats> = reg
            .instances
            .values()
            .map(|h| {
                let i = h.read();
                InstanceStats {
                    series: i.series.to_string(),
                    family: i.family,
                    max_window_ms: i.max_window,
                    bytes: i.byte_size(),
                    buckets: i.payload.unit_count(),
                    rules: i.ref_rules.keys().cloned().collect(),
                }
            })
            .collect();
        per_instance.sort_by(|a, b| (&a.series, a.family).cmp(&(&b.series, b.family)));
        let names = ["no_instance", "window_too_old", "cold_start"];
        CacheStats {
            instances: reg.instances.len(),
            rules: reg.rules.len(),
            bytes: per_instance.iter().map(|i| i.bytes).sum(),
            hits: self.hits.load(Ordering::Relaxed),
            misses: names
                .iter()
                .zip(&self.misses)
                .map(|(n, c)| (n.to_string(), c.load(Ordering::Relaxed)))
                .collect(),
            rejected: reg.instances.values().map(|h| h.read().rejected).sum(),
            per_instance,
        }
    }

    /// Write rules and instance payloads.
    pub fn write_snapshot(&self, mut w: impl Write) -> Result<()> {
        let reg = self.reg.read();
        let mut enc = Encoder::new();
        enc.len_prefixed(SNAPSHOT_MAGIC).u32(SNAPSHOT_VERSION);
        enc.u32(reg.rules.len() as u32);
        for r in reg.rules.values() {
            let json = serde_json::to_string(&r.spec).map_err(|e| Error::Codec(e.to_string()))?;
            enc.str(&json);
        }
        let mut keys: Vec<&(SeriesId, Family)> = reg.instances.keys().collect();
        keys.sort_by_cached_key(|(s, f)| (s.to_string(), *f));
        enc.u32(keys.len() as u32);
        for key in keys {
            let inst = reg.instances[key].read();
            let mut rec = Encoder::new();
            let series = serde_json::to_string(&inst.series).map_err(|e| Error::Codec(e.to_string()))?;
            rec.str(&series).u8(family_tag(inst.family));
            rec.u8(inst.first_ts.is_some() as u8)
                .i64(inst.first_ts.unwrap_or(0))
                .i64(inst.last_ts.unwrap_or(0));
            let mut names: Vec<(&u64, &Arc<str>)> = inst.names.iter().collect();
            names.sort_unstable_by_key(|x| *x.0);
            rec.u32(names.len() as u32);
            for (t, s) in names {
                rec.u64(*t).str(s);
            }
            inst.payload.encode(&mut rec);
            enc.len_prefixed(&rec.into_bytes());
        }
        w.write_all(&enc.into_bytes())?;
        Ok(())
    }

    /// Rebuild a cache from a snapshot written under the same config.
    pub fn read_snapshot(config: CacheConfig, mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut dec = Decoder::new(&bytes);
        if dec.len_prefixed()? != SNAPSHOT_MAGIC {
            return Err(Error::Codec("not a snapshot file".into()));
        }
        let version = dec.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Codec(format!("unsupported snapshot version {version}")));
        }
        let cache = Self::new(config)?;
        for _ in 0..dec.u32()? {
            let spec: RuleSpec = serde_json::from_str(&dec.str()?).map_err(|e| Error::Codec(e.to_string()))?;
            cache.register_rule(spec)?;
        }
        for _ in 0..dec.u32()? {
            let mut rec = Decoder::new(dec.len_prefixed()?);
            let series: SeriesId = serde_json::from_str(&rec.str()?).map_err(|e| Error::Codec(e.to_string()))?;
            let family = tag_family(rec.u8()?)?;
            let has = rec.u8()? == 1;
            let (first, last) = (rec.i64()?, rec.i64()?);
            let mut names = FxHashMap::default();
            for _ in 0..rec.u32()? {
                let t = rec.u64()?;
                names.insert(t, Arc::<str>::from(rec.str()?));
            }
            let mut cfg = cache.config.for_family(family).clone();
            cfg.seed = hash_u64(series.canonical_id() ^ family as u64, cfg.seed);
            let payload = Payload::decode(family, &mut rec, &cfg)?;
            cache.handles_for(&series)?;
            let h = cache
                .instance(&series, family)
                .ok_or_else(|| Error::Codec(format!("no rule covers {series} ({})", family.name())))?;
            let mut inst = h.write();
            inst.payload = payload;
            let span = inst.max_window;
            inst.payload.set_span(span);
            inst.first_ts = has.then_some(first);
            inst.last_ts = has.then_some(last);
            inst.names = names;
        }
        Ok(cache)
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"WSNP";
const SNAPSHOT_VERSION: u32 = 1;

fn family_tag(f: Family) -> u8 {
    f as u8
}

fn tag_family(t: u8) -> Result<Family> {
    Family::ALL
        .get(t as usize)
        .copied()
        .ok_or_else(|| Error::Codec(format!("unknown family tag {t}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(id: &str, expr: &str) -> RuleSpec {
        RuleSpec {
            id: id.into(),
            kind: RuleKind::Record,
            eval_interval_ms: 1_000,
            expr: expr.into(),
            condition: None,
        }
    }

    fn sid(m: &str, vm: &str) -> SeriesId {
        SeriesId::canonicalize(m, [("vm", vm)]).unwrap()
    }

    fn sample(s: &SeriesId, t: i64, v: f64) -> DataSample {
        DataSample::new(s.clone(), t, v).unwrap()
    }

    #[test]
    fn shared_instance_takes_larger_window() {
        let c = SketchCache::new(CacheConfig::default()).unwrap();
        let s = sid("cpu", "a");
        c.ingest(&sample(&s, 1, 1.0)).unwrap();
        c.register_rule(rule("r1", "quantile_over_time(0.5, cpu[5m])")).unwrap();
        c.register_rule(rule("r2", "max_over_time(cpu{vm=\"a\"}[10m])")).unwrap();
        assert_eq!(c.instance_count(), 1);
        let h = c.instance(&s, Family::Quantile).unwrap();
        assert_eq!(h.read().max_window(), 600_000);
        assert_eq!(c.unregister_rule("r2").unwrap(), 0);
        assert_eq!(h.read().max_window(), 300_000);
        assert_eq!(c.unregister_rule("r1").unwrap(), 1);
        assert_eq!(c.instance_count(), 0);
        assert!(matches!(c.unregister_rule("r1"), Err(Error::UnknownRule(_))));
    }

    #[test]
    fn unsupported_and_idempotent() {
        let c = SketchCache::new(CacheConfig::default()).unwrap();
        assert!(matches!(
            c.register_rule(rule("x", "last_over_time(cpu[5m])")),
            Err(Error::UnsupportedFunction(_))
        ));
        assert_eq!(c.rules().len(), 0);
        let s = sid("cpu", "a");
        c.ingest(&sample(&s, 1, 1.0)).unwrap();
        let r = rule("r", "avg_over_time(cpu[1m])");
        c.register_rule(r.clone()).unwrap();
        c.register_rule(r).unwrap();
        assert_eq!(c.instance_count(), 1);
        assert_eq!(c.rules().len(), 1);
    }

    #[test]
    fn new_series_get_instances_and_rejections_stay_local() {
        let c = SketchCache::new(CacheConfig::default()).unwrap();
        c.register_rule(rule("q", "quantile_over_time(0.9, cpu[1m])")).unwrap();
        let s = sid("cpu", "a");
        assert_eq!(c.ingest(&sample(&s, 10, 1.0)).unwrap(), (1, 0));
        // second family created after t=10 was seen
        c.register_rule(rule("a", "avg_over_time(cpu[1m])")).unwrap();
        assert_eq!(c.ingest(&sample(&s, 10, 2.0)).unwrap(), (1, 1));
        assert_eq!(c.ingest(&sample(&s, 11, 2.0)).unwrap(), (2, 0));
        assert_eq!(c.ingest(&sample(&s, 5, 2.0)).unwrap(), (0, 2));
    }

    #[test]
    fn lookup_reasons() {
        let c = SketchCache::new(CacheConfig::default()).unwrap();
        c.register_rule(rule("a", "avg_over_time(cpu[100ms])")).unwrap();
        let s = sid("cpu", "a");
        let q = TimeWindow::new(0, 50).unwrap();
        assert!(matches!(c.lookup(&sid("cpu", "b"), Family::Sample, &q), Err(Miss::NoInstance)));
        for t in 10..=1_000 {
            c.ingest(&sample(&s, t, 1.0)).unwrap();
        }
        assert!(c.lookup(&s, Family::Sample, &TimeWindow::new(900, 1_000).unwrap()).is_ok());
        assert!(matches!(
            c.lookup(&s, Family::Sample, &TimeWindow::new(800, 1_000).unwrap()),
            Err(Miss::WindowTooOld)
        ));
        c.register_rule(rule("b", "avg_over_time(cpu[10s])")).unwrap();
        assert!(matches!(
            c.lookup(&s, Family::Sample, &TimeWindow::new(5, 1_000).unwrap()),
            Err(Miss::ColdStart)
        ));
        let st = c.stats();
        assert_eq!(st.hits, 1);
        assert_eq!(st.misses["cold_start"], 1);
    }

    #[test]
    fn snapshot_roundtrip() {
        let c = SketchCache::new(CacheConfig::default()).unwrap();
        c.register_rule(rule("q", "quantile_over_time(0.9, cpu[1m])")).unwrap();
        c.register_rule(rule("e", "entropy_over_time(ip[1m])")).unwrap();
        c.register_rule(rule("s", "avg_over_time(cpu[1m])")).unwrap();
        let (s, ip) = (sid("cpu", "a"), sid("ip", "a"));
        for t in 1..=3_000 {
            c.ingest(&sample(&s, t, (t % 13) as f64)).unwrap();
            let v = SampleValue::Str(format!("10.0.0.{}", t % 7));
            c.ingest(&DataSample::new(ip.clone(), t, v).unwrap()).unwrap();
        }
        let mut buf = Vec::new();
        c.write_snapshot(&mut buf).unwrap();
        let d = SketchCache::read_snapshot(CacheConfig::default(), &buf[..]).unwrap();
        assert_eq!(d.instance_count(), 3);
        assert_eq!(d.bytes(), c.bytes());
        let hd = d.instance(&ip, Family::GSum).unwrap();
        assert_eq!(hd.read().item_of(SampleValue::from("10.0.0.3").token()), SampleValue::from("10.0.0.3"));
        buf[0] ^= 1;
        assert!(SketchCache::read_snapshot(CacheConfig::default(), &buf[..]).is_err());
    }
}
