use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use winsketch::ehkll::EhKll;
use winsketch::ehuniv::EhUniv;
use winsketch::sampler::SampleWindow;
use winsketch::SketchConfig;
use winsketch_bench::{zipf, zipf_tokens};

const N: usize = 100_000;

fn inserts(c: &mut Criterion) {
    let vals = zipf(N);
    let toks = zipf_tokens(N);
    let span = N as i64 * 100;
    let mut g = c.benchmark_group("insert");
    g.throughput(Throughput::Elements(N as u64));
    g.sample_size(10);
    g.bench_function("ehkll", |b| {
        let cfg = SketchConfig::quantile_default();
        b.iter_batched(
            || EhKll::new(&cfg, span).unwrap(),
            |mut e| {
                for &(t, v) in &vals {
                    e.insert(t, v).unwrap();
                }
                e
            },
            BatchSize::LargeInput,
        )
    });
    g.bench_function("ehuniv", |b| {
        let cfg = SketchConfig::gsum_default();
        b.iter_batched(
            || EhUniv::new(&cfg, span).unwrap(),
            |mut e| {
                for &(t, v) in &toks {
                    e.insert(t, v).unwrap();
                }
                e
            },
            BatchSize::LargeInput,
        )
    });
    g.bench_function("sampler", |b| {
        b.iter_batched(
            || SampleWindow::new(0.1, span, 1).unwrap(),
            |mut s| {
                for &(t, v) in &vals {
                    s.insert(t, v).unwrap();
                }
                s
            },
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, inserts);
criterion_main!(benches);
