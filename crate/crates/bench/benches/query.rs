use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use winsketch::ehkll::EhKll;
use winsketch::ehuniv::EhUniv;
use winsketch::query::{exact_eval, Func};
use winsketch::{GSumStat, SampleValue, SketchConfig, TimeWindow};
use winsketch_bench::{zipf, zipf_tokens};

const N: usize = 200_000;

fn queries(c: &mut Criterion) {
    let vals = zipf(N);
    let toks = zipf_tokens(N);
    let span = N as i64 * 100;
    let now = vals.last().unwrap().0;
    let mut kll = EhKll::new(&SketchConfig::quantile_default(), span).unwrap();
    for &(t, v) in &vals {
        kll.insert(t, v).unwrap();
    }
    let mut univ = EhUniv::new(&SketchConfig::gsum_default(), span).unwrap();
    for &(t, v) in &toks {
        univ.insert(t, v).unwrap();
    }
    let raw: Vec<SampleValue> = vals.iter().map(|&(_, v)| SampleValue::Float(v)).collect();

    let mut g = c.benchmark_group("query");
    g.sample_size(10);
    for frac in [10usize, 2, 1] {
        let len = N / frac;
        let w = TimeWindow::new(now - len as i64 * 100, now).unwrap();
        let refs: Vec<&SampleValue> = raw[N - len..].iter().collect();
        g.bench_with_input(BenchmarkId::new("ehkll_p99", len), &w, |b, w| {
            b.iter(|| kll.quantile(w, 0.99).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("ehuniv_entropy", len), &w, |b, w| {
            b.iter(|| univ.query(w, GSumStat::Entropy).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("exact_p99", len), &refs, |b, r| {
            b.iter(|| exact_eval(Func::Quantile, r, Some(0.99)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("exact_entropy", len), &refs, |b, r| {
            b.iter(|| exact_eval(Func::Entropy, r, None).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, queries);
criterion_main!(benches);
