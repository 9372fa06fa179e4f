//! Query routing: cache first, exact store on any miss.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{exact_eval, ExactStore, Family, Func, IngestStatus, QueryExpr, TopItem, Value};
use crate::cache::{CacheConfig, CacheInstance, Miss, Payload, RuleSpec, SketchCache};
use crate::ehkll::WindowEstimate;
use crate::error::{Error, Result};
use crate::model::{DataSample, SeriesId, TimeWindow, Timestamp};
use crate::query::parse;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub cache: CacheConfig,
    /// Raw samples are kept for this multiple of the largest rule window.
    pub exact_slack: f64,
    /// Raw-sample retention floor in ms, used before any rule exists.
    pub min_retention_ms: i64,
    /// When false every query goes to the exact store.
    pub use_cache: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            cache: CacheConfig::default(),
            exact_slack: 2.0,
            min_retention_ms: 3_600_000,
            use_cache: true,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.exact_slack >= 1.0 && self.exact_slack.is_finite()) {
            return Err(Error::InvalidConfig("exact_slack must be >= 1".into()));
        }
        if self.min_retention_ms <= 0 {
            return Err(Error::InvalidConfig("min_retention_ms must be positive".into()));
        }
        self.cache.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Cache,
    Exact,
    Mixed,
}

/// What an approximate answer's error is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// Normalized rank error of a quantile.
    Rank,
    /// Relative error of a GSum statistic, against the suffix from the
    /// window start to now.
    SuffixRelative,
    /// Relative standard error of a sampled moment.
    StdError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorBound {
    pub kind: BoundKind,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesResult {
    pub series: SeriesId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub source: Source,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<ErrorBound>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miss: Option<Miss>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub window: TimeWindow,
    pub series: Vec<SeriesResult>,
    /// `None` when no series matched.
    pub source: Option<Source>,
    /// Loosest bound over the cached series.
    pub error_annotation: Option<ErrorBound>,
}

#[derive(Debug)]
pub struct Engine {
    config: EngineConfig,
    exact: ExactStore,
    cache: SketchCache,
    kll_eps: OnceLock<f64>,
    newest: AtomicI64,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            exact: ExactStore::new(config.min_retention_ms),
            cache: SketchCache::new(config.cache.clone())?,
            config,
            kll_eps: OnceLock::new(),
            newest: AtomicI64::new(i64::MIN),
        })
    }

    /// Wrap an existing cache (e.g. one restored from a snapshot).
    pub fn with_cache(config: EngineConfig, cache: SketchCache) -> Result<Self> {
        config.validate()?;
        let e = Self {
            exact: ExactStore::new(config.min_retention_ms),
            cache,
            config,
            kll_eps: OnceLock::new(),
            newest: AtomicI64::new(i64::MIN),
        };
        e.update_retention();
        Ok(e)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn cache(&self) -> &SketchCache {
        &self.cache
    }

    pub fn exact(&self) -> &ExactStore {
        &self.exact
    }

    fn update_retention(&self) {
        let w = self.cache.max_rule_window() as f64 * self.config.exact_slack;
        self.exact
            .set_retention(self.config.min_retention_ms.max(w.min(i64::MAX as f64) as i64));
    }

    pub fn register_rule(&self, spec: RuleSpec) -> Result<Vec<(SeriesId, Family)>> {
        let out = self.cache.register_rule(spec)?;
        self.update_retention();
        Ok(out)
    }

    pub fn unregister_rule(&self, id: &str) -> Result<usize> {
        let n = self.cache.unregister_rule(id)?;
        self.update_retention();
        Ok(n)
    }

    /// Store the sample and feed it to its cache instances. The status is
    /// the exact store's; instance rejections are counted by the cache.
    pub fn ingest(&self, s: &DataSample) -> Result<IngestStatus> {
        let status = self.exact.ingest(s);
        self.newest.fetch_max(s.timestamp, Ordering::Relaxed);
        self.cache.ingest(s)?;
        Ok(status)
    }

    /// Newest timestamp ingested into any series.
    pub fn newest_ts(&self) -> Option<Timestamp> {
        let t = self.newest.load(Ordering::Relaxed);
        (t != i64::MIN).then_some(t)
    }

    pub fn ingest_batch(&self, batch: &[DataSample]) -> Result<Vec<IngestStatus>> {
        batch.iter().map(|s| self.ingest(s)).collect()
    }

    /// Rank error of a standalone KLL sketch at the configured width,
    /// measured once on first use.
    pub fn kll_epsilon(&self) -> f64 {
        *self
            .kll_eps
            .get_or_init(|| crate::harness::calibrate_kll(self.config.cache.quantile.k_kll, 100_000, 10, 7))
    }

    pub fn query(&self, text: &str, at: Timestamp) -> Result<QueryResult> {
        self.evaluate(&parse(text)?, at)
    }

    pub fn evaluate(&self, q: &QueryExpr, at: Timestamp) -> Result<QueryResult> {
        self.evaluate_with(q, at, self.config.use_cache)
    }

    /// Evaluate, optionally bypassing the cache for this query only.
    pub fn evaluate_with(&self, q: &QueryExpr, at: Timestamp, use_cache: bool) -> Result<QueryResult> {
        if at < 0 {
            return Err(Error::InvalidConfig(format!("negative evaluation time {at}")));
        }
        let end = at - q.offset;
        let window = TimeWindow::new(end - q.range, end)?;
        let family = q.func.family();
        let mut ids: Vec<SeriesId> = self.exact.select(&q.selector).into_iter().map(|(id, _)| id).collect();
        if use_cache {
            // restored instances may cover series the exact store has not seen
            for id in self.cache.select(&q.selector, family) {
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            ids.sort_by_cached_key(|id| id.to_string());
        }
        let mut series = Vec::new();
        for id in ids {
            let mut miss = None;
            if use_cache {
                match self.cache.lookup(&id, family, &window) {
                    Ok(hit) => {
                        let inst = hit.instance.read();
                        if let Ok((value, bound)) = self.eval_cached(&inst, q, &hit.window) {
                            series.push(SeriesResult {
                                series: id,
                                value: Some(value),
                                error: None,
                                source: Source::Cache,
                                bound: Some(bound),
                                miss: None,
                            });
                            continue;
                        }
                    }
                    Err(m) => miss = Some(m),
                }
            }
            let r = self.eval_exact(&id, q, &window);
            if matches!(r, Err(Error::EmptyRange)) {
                continue;
            }
            let (value, error) = match r {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e.to_string())),
            };
            series.push(SeriesResult {
                series: id,
                value,
                error,
                source: Source::Exact,
                bound: None,
                miss,
            });
        }
        let source = match (
            series.iter().any(|s| s.source == Source::Cache),
            series.iter().any(|s| s.source == Source::Exact),
        ) {
            (false, false) => None,
            (true, false) => Some(Source::Cache),
            (false, true) => Some(Source::Exact),
            (true, true) => Some(Source::Mixed),
        };
        let error_annotation = series
            .iter()
            .filter_map(|s| s.bound)
            .max_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
        Ok(QueryResult {
            window,
            series,
            source,
            error_annotation,
        })
    }

    fn eval_exact(&self, id: &SeriesId, q: &QueryExpr, w: &TimeWindow) -> Result<Value> {
        let handle = self.exact.get(id).ok_or(Error::EmptyRange)?;
        let s = handle.read();
        exact_eval(q.func, &s.window(w), q.arg)
    }

    fn eval_cached(&self, inst: &CacheInstance, q: &QueryExpr, w: &TimeWindow) -> Result<(Value, ErrorBound)> {
        match inst.payload() {
            Payload::Quantile(eh) => {
                let phi = match q.func {
                    Func::Min => 0.0,
                    Func::Max => 1.0,
                    _ => q.arg.unwrap_or(0.5),
                };
                let est = eh.quantile(w, phi)?;
                let k = eh.window().k() as f64;
                let eps = if est.single_bucket {
                    1.0
                } else {
                    2.0 / k * suffix_ratio(&est) + self.kll_epsilon()
                };
                Ok((Value::Scalar(est.value), bound(BoundKind::Rank, eps)))
            }
            Payload::GSum(eh) => {
                let k = eh.window().k() as f64;
                let est = if q.func == Func::TopK {
                    let n = q.arg.unwrap_or(1.0) as usize;
                    eh.topk(w, n)?.map(|items| {
                        Value::TopK(
                            items
                                .into_iter()
                                .map(|(t, c)| TopItem {
                                    item: inst.item_of(t),
                                    count: c,
                                })
                                .collect(),
                        )
                    })
                } else {
                    let stat = q.func.gsum().ok_or(Error::UnsupportedFunction(q.func.stem().into()))?;
                    eh.query(w, stat)?.map(Value::Scalar)
                };
                let eps = if est.single_bucket { 1.0 } else { 1.0 / k.sqrt() };
                Ok((est.value, bound(BoundKind::SuffixRelative, eps)))
            }
            Payload::Sample(sw) => {
                let stat = q.func.moment().ok_or(Error::UnsupportedFunction(q.func.stem().into()))?;
                let v = sw.query(w, stat)?;
                let eps = if sw.prob() >= 1.0 {
                    0.0
                } else {
                    1.0 / (sw.values_in(w).len() as f64).sqrt()
                };
                Ok((Value::Scalar(v), bound(BoundKind::StdError, eps)))
            }
        }
    }
}

fn bound(kind: BoundKind, epsilon: f64) -> ErrorBound {
    ErrorBound { kind, epsilon }
}

fn suffix_ratio<T>(est: &WindowEstimate<T>) -> f64 {
    est.suffix_items as f64 / est.merged_items.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::RuleKind;

    fn rule(id: &str, expr: &str) -> RuleSpec {
        RuleSpec {
            id: id.into(),
            kind: RuleKind::Record,
            eval_interval_ms: 1_000,
            expr: expr.into(),
            condition: None,
        }
    }

    fn feed(e: &Engine, n: i64) -> SeriesId {
        let id = SeriesId::canonicalize("lat", [("vm", "a")]).unwrap();
        for t in 1..=n {
            let v = ((t * 7919) % 1_000) as f64;
            e.ingest(&DataSample::new(id.clone(), t * 100, v).unwrap()).unwrap();
        }
        id
    }

    #[test]
    fn cold_then_warm() {
        let e = Engine::new(EngineConfig::default()).unwrap();
        let q = "quantile_over_time(0.5, lat[100s])";
        assert_eq!(e.query(q, 1_000).unwrap().source, None);
        feed(&e, 10);
        let r = e.query(q, 1_000).unwrap();
        assert_eq!(r.source, Some(Source::Exact));
        assert_eq!(r.series[0].miss, Some(Miss::NoInstance));
        e.register_rule(rule("r", q)).unwrap();
        // instance only sees data after registration
        let r = e.query(q, 1_000).unwrap();
        assert_eq!(r.series[0].miss, Some(Miss::ColdStart));
        let id = SeriesId::canonicalize("lat", [("vm", "a")]).unwrap();
        for t in 11..=3_000 {
            e.ingest(&DataSample::new(id.clone(), t * 100, (t % 10) as f64).unwrap()).unwrap();
        }
        let r = e.query(q, 300_000).unwrap();
        assert_eq!(r.source, Some(Source::Cache));
        assert_eq!(r.error_annotation.unwrap().kind, BoundKind::Rank);
        let exact = e.query("quantile_over_time(0.5, lat[100s])", 300_000).unwrap();
        assert!((exact.series[0].value.as_ref().unwrap().as_scalar().unwrap() - 4.0).abs() <= 1.0);
    }

    #[test]
    fn disabled_cache_matches_exact() {
        let cfg = EngineConfig {
            use_cache: false,
            ..Default::default()
        };
        let e = Engine::new(cfg).unwrap();
        e.register_rule(rule("r", "avg_over_time(lat[10s])")).unwrap();
        let id = feed(&e, 500);
        let h = e.exact().get(&id).unwrap();
        for f in Func::ALL {
            let q = QueryExpr {
                func: f,
                arg: f.takes_arg().then_some(if f == Func::TopK { 3.0 } else { 0.3 }),
                selector: super::super::Selector {
                    metric: "lat".into(),
                    matchers: vec![],
                },
                range: 10_000,
                offset: 2_000,
            };
            let r = e.evaluate(&q, 50_000).unwrap();
            let w = TimeWindow::new(38_000, 48_000).unwrap();
            let want = exact_eval(f, &h.read().window(&w), q.arg).unwrap();
            assert_eq!(r.series[0].value.as_ref().unwrap(), &want, "{f:?}");
            assert_eq!(r.source, Some(Source::Exact));
        }
    }

    #[test]
    fn retention_follows_rules() {
        let e = Engine::new(EngineConfig {
            min_retention_ms: 1_000,
            ..Default::default()
        })
        .unwrap();
        e.register_rule(rule("a", "entropy_over_time(x[1m])")).unwrap();
        assert_eq!(e.exact().retention(), 120_000);
        e.unregister_rule("a").unwrap();
        assert_eq!(e.exact().retention(), 1_000);
    }
}
