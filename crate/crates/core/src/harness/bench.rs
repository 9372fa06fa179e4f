//! Drill-down accuracy and throughput runs over one stream.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::data::{generate, read_trace, Dataset};
use super::metrics::{ks_error, mre, phi_grid, recall, rel_err};
use super::oracle;
use crate::ehkll::EhKll;
use crate::ehuniv::EhUniv;
use crate::error::{Error, Result};
use crate::model::{SampleValue, SketchConfig, TimeWindow, Timestamp};
use crate::sampler::{MomentStat, SampleWindow};
use crate::univ::GSumStat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    EhKll,
    EhUniv,
    Sampler,
    All,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::EhKll => "ehkll",
            Algo::EhUniv => "ehuniv",
            Algo::Sampler => "sampler",
            Algo::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamSource {
    Synthetic(Dataset),
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub source: StreamSource,
    pub n: usize,
    /// Window length in samples.
    pub window: usize,
    pub algo: Algo,
    pub seed: u64,
    pub quantile: SketchConfig,
    pub gsum: SketchConfig,
    pub sample: SketchConfig,
    pub topk: usize,
}

impl BenchSpec {
    pub fn new(source: StreamSource, n: usize, window: usize, algo: Algo) -> Self {
        Self {
            source,
            n,
            window,
            algo,
            seed: 1,
            quantile: SketchConfig::quantile_default(),
            gsum: SketchConfig::gsum_default(),
            sample: SketchConfig::sample_default(),
            topk: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.n < self.window {
            return Err(Error::InvalidConfig("need n >= window >= 1".into()));
        }
        if self.topk == 0 {
            return Err(Error::InvalidConfig("topk must be at least 1".into()));
        }
        for c in [&self.quantile, &self.gsum, &self.sample] {
            c.validate()?;
        }
        Ok(())
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub stat: String,
    pub window_start: Timestamp,
    pub window_end: Timestamp,
    pub estimate: f64,
    pub truth: f64,
    pub rel_err: f64,
    pub extra: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlgoSummary {
    pub algo: &'static str,
    pub bytes: usize,
    /// Buckets, or retained samples for the sampler.
    pub units: usize,
    pub inserts_per_sec: f64,
    pub queries_per_sec: f64,
    /// Mean error per statistic: MRE, KS for `ks`, recall for `topk_recall`.
    pub mean_error: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub n: usize,
    pub window: usize,
    pub seed: u64,
    pub rows: Vec<Row>,
    pub algos: Vec<AlgoSummary>,
}

impl BenchReport {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(|e| Error::Codec(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!("n={} window={} seed={} (quantile KS over a 99-point grid)\n", self.n, self.window, self.seed);
        for a in &self.algos {
            let _ = writeln!(
                s,
                "{:<8} bytes={:<10} units={:<8} inserts/s={:<10.0} queries/s={:.1}",
                a.algo, a.bytes, a.units, a.inserts_per_sec, a.queries_per_sec
            );
            for (k, v) in &a.mean_error {
                let _ = writeln!(s, "         {k:<12} {v:.6}");
            }
        }
        s
    }
}

/// Whole window, its ten tenths, then ten hundredths of the newest tenth,
/// as index ranges into the stream.
pub fn drill_down(n: usize, window: usize) -> Vec<(usize, usize)> {
    let lo = n - window;
    let mut out = vec![(lo, n)];
    let tenth = window / 10;
    if tenth > 0 {
        out.extend((0..10).map(|i| (lo + i * tenth, lo + (i + 1) * tenth)));
        let hundredth = window / 100;
        if hundredth > 0 {
            let base = n - 10 * hundredth;
            out.extend((0..10).map(|i| (base + i * hundredth, base + (i + 1) * hundredth)));
        }
    }
    out
}

struct Stream {
    ts: Vec<Timestamp>,
    values: Vec<SampleValue>,
}

impl Stream {
    /// Time window covering samples `lo..hi`.
    fn window(&self, lo: usize, hi: usize) -> TimeWindow {
        let start = if lo == 0 { self.ts[0] - 1 } else { self.ts[lo - 1] };
        TimeWindow {
            start,
            end: self.ts[hi - 1],
        }
    }

    /// Samples inside `w`.
    fn slice(&self, w: &TimeWindow) -> &[SampleValue] {
        let a = self.ts.partition_point(|&t| t <= w.start);
        let b = self.ts.partition_point(|&t| t <= w.end);
        &self.values[a..b]
    }

    fn numeric(&self) -> Result<Vec<f64>> {
        self.values
            .iter()
            .map(SampleValue::as_f64)
            .collect::<Option<Vec<f64>>>()
            .ok_or(Error::NotNumeric { func: "ehkll/sampler" })
    }
}

fn load(spec: &BenchSpec) -> Result<Stream> {
    let pairs: Vec<(Timestamp, SampleValue)> = match &spec.source {
        StreamSource::Synthetic(d) => generate(*d, spec.n, spec.seed)
            .into_iter()
            .map(|(t, v)| (t, SampleValue::Float(v)))
            .collect(),
        StreamSource::File(p) => {
            let mut v = read_trace(p)?;
            v.truncate(spec.n);
            v
        }
    };
    if pairs.len() < spec.window {
        return Err(Error::InvalidConfig(format!(
            "stream has {} samples, fewer than the window {}",
            pairs.len(),
            spec.window
        )));
    }
    if pairs.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::InvalidConfig("trace timestamps must be nondecreasing".into()));
    }
    let (ts, values) = pairs.into_iter().unzip();
    Ok(Stream { ts, values })
}

pub fn run(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let stream = load(spec)?;
    let n = stream.ts.len();
    let windows: Vec<TimeWindow> = drill_down(n, spec.window)
        .into_iter()
        .map(|(a, b)| stream.window(a, b))
        .collect();
    let span = windows[0].span();
    let algos = match spec.algo {
        Algo::All => vec![Algo::EhKll, Algo::EhUniv, Algo::Sampler],
        a => vec![a],
    };
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for a in algos {
        let before = rows.len();
        let mut s = match a {
            Algo::EhKll => run_ehkll(spec, &stream, &windows, span, &mut rows)?,
            Algo::EhUniv => run_ehuniv(spec, &stream, &windows, span, &mut rows)?,
            _ => run_sampler(spec, &stream, &windows, span, &mut rows)?,
        };
        s.mean_error = mean_by_stat(&rows[before..]);
        summaries.push(s);
    }
    Ok(BenchReport {
        n,
        window: spec.window,
        seed: spec.seed,
        rows,
        algos: summaries,
    })
}

fn mean_by_stat(rows: &[Row]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let v = match r.stat.as_str() {
            "ks" | "topk_recall" => r.estimate,
            _ => r.rel_err,
        };
        let e = acc.entry(r.stat.clone()).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect()
}

fn rate(count: usize, d: Duration) -> f64 {
    count as f64 / d.as_secs_f64().max(1e-9)
}

fn run_ehkll(spec: &BenchSpec, st: &Stream, windows: &[TimeWindow], span: i64, rows: &mut Vec<Row>) -> Result<AlgoSummary> {
    let vals = st.numeric()?;
    let mut eh = EhKll::new(&spec.quantile, span)?;
    let t0 = Instant::now();
    for (&t, &v) in st.ts.iter().zip(&vals) {
        eh.insert(t, v)?;
    }
    let ins = t0.elapsed();
    let grid = phi_grid();
    let mut qtime = Duration::ZERO;
    for w in windows {
        let t1 = Instant::now();
        let est = eh.quantiles(w, &grid)?;
        qtime += t1.elapsed();
        let truth: Vec<f64> = st.slice(w).iter().filter_map(SampleValue::as_f64).collect();
        let sorted = oracle::sorted(&truth);
        let pairs: Vec<(f64, f64)> = grid.iter().copied().zip(est.value).collect();
        let ks = ks_error(&pairs, &sorted)?;
        rows.push(Row {
            stat: "ks".into(),
            window_start: w.start,
            window_end: w.end,
            estimate: ks,
            truth: 0.0,
            rel_err: ks,
            extra: format!("grid=99;n={}", sorted.len()),
        });
    }
    Ok(AlgoSummary {
        algo: Algo::EhKll.name(),
        bytes: eh.byte_size(),
        units: eh.window().len(),
        inserts_per_sec: rate(vals.len(), ins),
        queries_per_sec: rate(windows.len(), qtime),
        mean_error: BTreeMap::new(),
    })
}

fn run_ehuniv(spec: &BenchSpec, st: &Stream, windows: &[TimeWindow], span: i64, rows: &mut Vec<Row>) -> Result<AlgoSummary> {
    let mut eh = EhUniv::new(&spec.gsum, span)?;
    let t0 = Instant::now();
    for (&t, v) in st.ts.iter().zip(&st.values) {
        eh.insert(t, v.token())?;
    }
    let ins = t0.elapsed();
    let stats = [
        ("distinct", GSumStat::L0, oracle::distinct as fn(&_) -> f64),
        ("entropy", GSumStat::Entropy, oracle::entropy),
        ("l2", GSumStat::L2, oracle::l2),
    ];
    let mut qtime = Duration::ZERO;
    let mut queries = 0;
    for w in windows {
        let freq = oracle::frequencies(st.slice(w).iter().map(SampleValue::token));
        let t1 = Instant::now();
        let (combined, _) = eh.combined(w)?;
        let mut est = Vec::new();
        for (_, s, _) in &stats {
            est.push(combined.stat(*s)?);
        }
        let top = combined.topk(spec.topk);
        qtime += t1.elapsed();
        queries += stats.len() + 1;
        for ((name, _, truth_fn), e) in stats.iter().zip(est) {
            let truth = truth_fn(&freq);
            rows.push(Row {
                stat: (*name).into(),
                window_start: w.start,
                window_end: w.end,
                estimate: e,
                truth,
                rel_err: rel_err(e, truth),
                extra: String::new(),
            });
        }
        let want = oracle::top(&freq, spec.topk);
        let want_items: Vec<u64> = want.iter().map(|x| x.0).collect();
        let got_items: Vec<u64> = top.iter().map(|x| x.0).collect();
        let r = recall(&got_items, &want_items);
        let item_pairs: Vec<(f64, f64)> = top
            .iter()
            .filter_map(|&(t, c)| freq.get(&t).map(|&f| (c, f as f64)))
            .collect();
        rows.push(Row {
            stat: "topk_recall".into(),
            window_start: w.start,
            window_end: w.end,
            estimate: r,
            truth: 1.0,
            rel_err: 1.0 - r,
            extra: format!("k={};item_mre={:.6}", spec.topk, mre(&item_pairs)),
        });
    }
    Ok(AlgoSummary {
        algo: Algo::EhUniv.name(),
        bytes: eh.byte_size(),
        units: eh.window().len(),
        inserts_per_sec: rate(st.values.len(), ins),
        queries_per_sec: rate(queries, qtime),
        mean_error: BTreeMap::new(),
    })
}

fn run_sampler(spec: &BenchSpec, st: &Stream, windows: &[TimeWindow], span: i64, rows: &mut Vec<Row>) -> Result<AlgoSummary> {
    let vals = st.numeric()?;
    let mut sw = SampleWindow::new(spec.sample.sample_prob, span, spec.sample.seed ^ spec.seed)?;
    let t0 = Instant::now();
    for (&t, &v) in st.ts.iter().zip(&vals) {
        sw.insert(t, v)?;
    }
    let ins = t0.elapsed();
    let mut qtime = Duration::ZERO;
    let mut queries = 0;
    for w in windows {
        let truth: Vec<f64> = st.slice(w).iter().filter_map(SampleValue::as_f64).collect();
        for stat in MomentStat::ALL {
            let want = match stat {
                MomentStat::Avg => oracle::mean(&truth),
                MomentStat::Sum => Some(oracle::sum(&truth)),
                MomentStat::Count => Some(truth.len() as f64),
                MomentStat::StdVar => oracle::variance(&truth),
                MomentStat::StdDev => oracle::variance(&truth).map(f64::sqrt),
            };
            let t1 = Instant::now();
            let got = sw.query(w, stat);
            qtime += t1.elapsed();
            queries += 1;
            let (Some(want), Ok(got)) = (want, got) else {
                continue;
            };
            rows.push(Row {
                stat: stat.name().into(),
                window_start: w.start,
                window_end: w.end,
                estimate: got,
                truth: want,
                rel_err: rel_err(got, want),
                extra: format!("p={}", sw.prob()),
            });
        }
    }
    Ok(AlgoSummary {
        algo: Algo::Sampler.name(),
        bytes: sw.byte_size(),
        units: sw.len(),
        inserts_per_sec: rate(vals.len(), ins),
        queries_per_sec: rate(queries, qtime),
        mean_error: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drill_down_shape() {
        let d = drill_down(1_500, 1_000);
        assert_eq!(d.len(), 21);
        assert_eq!(d[0], (500, 1_500));
        assert_eq!(d[10], (1_400, 1_500));
        assert_eq!(d[20], (1_490, 1_500));
    }

    #[test]
    fn full_rate_sampler_is_exact() {
        let mut spec = BenchSpec::new(StreamSource::Synthetic(Dataset::Uniform), 20_000, 10_000, Algo::Sampler);
        spec.sample.sample_prob = 1.0;
        let r = run(&spec).unwrap();
        assert!(!r.rows.is_empty());
        assert!(r.rows.iter().all(|x| x.rel_err == 0.0), "{:?}", r.rows.iter().find(|x| x.rel_err != 0.0));
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("stat,window_start,window_end,estimate,truth,rel_err,extra\n"));
    }

    #[test]
    fn small_all_run() {
        let spec = BenchSpec::new(StreamSource::Synthetic(Dataset::Zipf), 30_000, 20_000, Algo::All);
        let r = run(&spec).unwrap();
        assert_eq!(r.algos.len(), 3);
        assert!(r.algos[0].mean_error["ks"] <= 0.05);
        assert!(r.summary().contains("ehuniv"));
        assert!(run(&BenchSpec::new(StreamSource::Synthetic(Dataset::Zipf), 10, 20, Algo::All)).is_err());
    }
}
