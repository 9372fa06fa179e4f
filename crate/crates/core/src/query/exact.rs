//! Raw-sample store and brute-force evaluation, the fallback path.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use rustc_hash::FxHashMap;
use serde::Serialize;

use super::{Func, Selector, TopItem, Value};
use crate::ehuniv::exact_stat;
use crate::error::{Error, Result};
use crate::model::{DataSample, SampleValue, SeriesId, TimeWindow, Timestamp};
use crate::sampler::moment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestStatus {
    Accepted,
    OutOfOrder,
    Duplicate,
}

/// Time-ordered raw samples of one series.
#[derive(Debug, Default)]
pub struct ExactSeries {
    samples: VecDeque<(Timestamp, SampleValue)>,
}

impl ExactSeries {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn newest_ts(&self) -> Option<Timestamp> {
        self.samples.back().map(|s| s.0)
    }

    fn push(&mut self, t: Timestamp, v: SampleValue, retention: i64) -> IngestStatus {
        match self.newest_ts() {
            Some(n) if t < n => return IngestStatus::OutOfOrder,
            Some(n) if t == n => return IngestStatus::Duplicate,
            _ => {}
        }
        self.samples.push_back((t, v));
        let cutoff = t.saturating_sub(retention);
        while self.samples.front().is_some_and(|s| s.0 <= cutoff) {
            self.samples.pop_front();
        }
        IngestStatus::Accepted
    }

    /// Values in `(q.start, q.end]`, oldest first.
    pub fn window(&self, q: &TimeWindow) -> Vec<&SampleValue> {
        let lo = self.samples.partition_point(|s| s.0 <= q.start);
        let hi = self.samples.partition_point(|s| s.0 <= q.end);
        self.samples.range(lo..hi).map(|s| &s.1).collect()
    }
}

/// Per-series ring buffers standing in for the backing TSDB.
#[derive(Debug)]
pub struct ExactStore {
    series: RwLock<FxHashMap<SeriesId, Arc<RwLock<ExactSeries>>>>,
    retention: AtomicI64,
}

impl ExactStore {
    pub fn new(retention: i64) -> Self {
        Self {
            series: RwLock::new(FxHashMap::default()),
            retention: AtomicI64::new(retention.max(1)),
        }
    }

    pub fn retention(&self) -> i64 {
        self.retention.load(Ordering::Relaxed)
    }

    /// Applies to trimming from the next insert on.
    pub fn set_retention(&self, ms: i64) {
        self.retention.store(ms.max(1), Ordering::Relaxed);
    }

    pub fn ingest(&self, s: &DataSample) -> IngestStatus {
        let handle = self.series.read().get(&s.series).cloned();
        let handle = match handle {
            Some(h) => h,
            None => self.series.write().entry(s.series.clone()).or_default().clone(),
        };
        let retention = self.retention();
        let status = handle.write().push(s.timestamp, s.value.clone(), retention);
        status
    }

    pub fn get(&self, id: &SeriesId) -> Option<Arc<RwLock<ExactSeries>>> {
        self.series.read().get(id).cloned()
    }

    /// Matching series, ordered by canonical text.
    pub fn select(&self, sel: &Selector) -> Vec<(SeriesId, Arc<RwLock<ExactSeries>>)> {
        let mut out: Vec<(SeriesId, Arc<RwLock<ExactSeries>>)> = self
            .series
            .read()
            .iter()
            .filter(|(id, _)| sel.matches(id))
            .map(|(id, h)| (id.clone(), h.clone()))
            .collect();
        out.sort_by_cached_key(|(id, _)| id.to_string());
        out
    }

    pub fn series_count(&self) -> usize {
        self.series.read().len()
    }

    pub fn sample_count(&self) -> usize {
        self.series.read().values().map(|s| s.read().len()).sum()
    }
}

fn numeric(values: &[&SampleValue], func: Func) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|v| v.as_f64())
        .collect::<Option<Vec<f64>>>()
        .ok_or(Error::NotNumeric { func: func.stem() })
}

/// Reference semantics of every range function over time-ordered values.
pub fn exact_eval(func: Func, values: &[&SampleValue], arg: Option<f64>) -> Result<Value> {
    if values.is_empty() {
        return Err(Error::EmptyRange);
    }
    if let Some(stat) = func.moment() {
        let v = numeric(values, func)?;
        return moment(&v, stat, 1.0).map(Value::Scalar);
    }
    if let Some(stat) = func.gsum() {
        let mut counts: FxHashMap<u64, u64> = FxHashMap::default();
        for v in values {
            *counts.entry(v.token()).or_default() += 1;
        }
        return exact_stat(counts.into_values(), stat).map(Value::Scalar);
    }
    match func {
        Func::Quantile | Func::Min | Func::Max => {
            let mut v = numeric(values, func)?;
            v.sort_unstable_by(f64::total_cmp);
            let phi = match func {
                Func::Min => 0.0,
                Func::Max => 1.0,
                _ => arg.unwrap_or(0.5).clamp(0.0, 1.0),
            };
            let rank = ((phi * v.len() as f64).ceil() as usize).clamp(1, v.len());
            Ok(Value::Scalar(v[rank - 1]))
        }
        Func::TopK => {
            let k = arg.unwrap_or(1.0).max(1.0) as usize;
            let mut counts: FxHashMap<u64, (u64, &SampleValue)> = FxHashMap::default();
            for v in values {
                counts.entry(v.token()).or_insert((0, v)).0 += 1;
            }
            let mut all: Vec<(u64, u64, &SampleValue)> =
                counts.into_iter().map(|(t, (c, v))| (t, c, v)).collect();
            all.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            all.truncate(k);
            Ok(Value::TopK(
                all.into_iter()
                    .map(|(_, c, v)| TopItem {
                        item: v.clone(),
                        count: c as f64,
                    })
                    .collect(),
            ))
        }
        _ => unreachable!("moment and gsum functions handled above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vals(xs: &[f64]) -> Vec<SampleValue> {
        xs.iter().map(|&x| SampleValue::Float(x)).collect()
    }

    fn refs(v: &[SampleValue]) -> Vec<&SampleValue> {
        v.iter().collect()
    }

    #[test]
    fn median_of_three() {
        let v = vals(&[3.0, 1.0, 2.0]);
        assert_eq!(exact_eval(Func::Quantile, &refs(&v), Some(0.5)).unwrap(), Value::Scalar(2.0));
        assert_eq!(exact_eval(Func::Min, &refs(&v), None).unwrap(), Value::Scalar(1.0));
        assert_eq!(exact_eval(Func::Max, &refs(&v), None).unwrap(), Value::Scalar(3.0));
    }

    #[test]
    fn entropy_and_distinct() {
        let v: Vec<SampleValue> = ["a", "a", "b", "b"].iter().map(|s| SampleValue::from(*s)).collect();
        assert_eq!(exact_eval(Func::Entropy, &refs(&v), None).unwrap(), Value::Scalar(1.0));
        let v: Vec<SampleValue> = ["a", "a", "a"].iter().map(|s| SampleValue::from(*s)).collect();
        assert_eq!(exact_eval(Func::Distinct, &refs(&v), None).unwrap(), Value::Scalar(1.0));
        assert_eq!(exact_eval(Func::L2, &refs(&v), None).unwrap(), Value::Scalar(3.0));
    }

    #[test]
    fn topk_and_errors() {
        let v: Vec<SampleValue> = ["a", "a", "b"].iter().map(|s| SampleValue::from(*s)).collect();
        let Value::TopK(items) = exact_eval(Func::TopK, &refs(&v), Some(5.0)).unwrap() else {
            panic!()
        };
        assert_eq!(items[0].item, SampleValue::from("a"));
        assert_eq!(items.len(), 2);
        assert!(matches!(exact_eval(Func::Avg, &refs(&v), None), Err(Error::NotNumeric { .. })));
        assert!(matches!(exact_eval(Func::Avg, &[], None), Err(Error::EmptyRange)));
        let one = vals(&[1.0]);
        assert!(matches!(
            exact_eval(Func::StdDev, &refs(&one), None),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn store_rejects_and_trims() {
        let st = ExactStore::new(100);
        let id = SeriesId::canonicalize("m", [("a", "1")]).unwrap();
        let s = |t| DataSample::new(id.clone(), t, 1.0).unwrap();
        assert_eq!(st.ingest(&s(10)), IngestStatus::Accepted);
        assert_eq!(st.ingest(&s(10)), IngestStatus::Duplicate);
        assert_eq!(st.ingest(&s(5)), IngestStatus::OutOfOrder);
        assert_eq!(st.ingest(&s(200)), IngestStatus::Accepted);
        assert_eq!(st.get(&id).unwrap().read().len(), 1);
        let sel = Selector {
            metric: "m".into(),
            matchers: vec![("a".into(), "1".into())],
        };
        assert_eq!(st.select(&sel).len(), 1);
        let sel = Selector {
            metric: "m".into(),
            matchers: vec![("a".into(), "2".into())],
        };
        assert!(st.select(&sel).is_empty());
    }
}
