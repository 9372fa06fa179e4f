use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use winsketch::harness::{self, Algo, BenchSpec, Dataset, StreamSource};
use winsketch_cli::config::{ENV_LISTEN, ENV_SEED};
use winsketch_cli::ServiceConfig;

#[derive(Parser)]
#[command(name = "winsketch", version, about = "Sub-window sketch cache for timeseries rule queries")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run an accuracy/throughput benchmark and print a summary.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Zipf,
    Uniform,
    Dynamic,
    File,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Ehkll,
    Ehuniv,
    Sampler,
    All,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long, value_enum)]
    dataset: DatasetArg,
    /// CSV trace with header `ts_ms,value` (for `--dataset file`).
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    /// Window length in samples.
    #[arg(long, default_value_t = 1_000_000)]
    window: usize,
    #[arg(long, value_enum, default_value = "all")]
    algo: AlgoArg,
    #[arg(long, env = ENV_SEED, default_value_t = 1)]
    seed: u64,
    /// Write per-window rows here as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides k_eh for both histogram families.
    #[arg(long)]
    k_eh: Option<u32>,
    #[arg(long)]
    k_kll: Option<u32>,
    /// Sampling probability for the sampler.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, default_value_t = 20)]
    topk: usize,
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    let source = match a.dataset {
        DatasetArg::Zipf => StreamSource::Synthetic(Dataset::Zipf),
        DatasetArg::Uniform => StreamSource::Synthetic(Dataset::Uniform),
        DatasetArg::Dynamic => StreamSource::Synthetic(Dataset::Dynamic),
        DatasetArg::File => match a.file {
            Some(p) => StreamSource::File(p),
            None => bail!("--dataset file needs --file"),
        },
    };
    let algo = match a.algo {
        AlgoArg::Ehkll => Algo::EhKll,
        AlgoArg::Ehuniv => Algo::EhUniv,
        AlgoArg::Sampler => Algo::Sampler,
        AlgoArg::All => Algo::All,
    };
    let mut spec = BenchSpec::new(source, a.n, a.window, algo);
    spec.seed = a.seed;
    spec.topk = a.topk;
    if let Some(k) = a.k_eh {
        spec.quantile.k_eh = k;
        spec.gsum.k_eh = k;
    }
    if let Some(k) = a.k_kll {
        spec.quantile.k_kll = k;
    }
    if let Some(p) = a.p {
        spec.sample.sample_prob = p;
    }
    let report = harness::run(&spec)?;
    if let Some(path) = &a.out {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        report.write_csv(BufWriter::new(f))?;
    }
    print!("{}", report.summary());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match Cli::parse().cmd {
        Cmd::Serve { config } => {
            let mut cfg = match config {
                Some(p) => ServiceConfig::load(&p)?,
                None => ServiceConfig::default(),
            };
            cfg.apply_env()
                .with_context(|| format!("reading {ENV_LISTEN}/{ENV_SEED}"))?;
            tokio::runtime::Runtime::new()?.block_on(winsketch_cli::serve(cfg))
        }
        Cmd::Bench(a) => bench(a),
    }
}
