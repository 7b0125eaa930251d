use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use memoindex::{EngineBackend, IndexConfig};
use memoindex_bench::report::{report_csv, scaling_csv, scaling_path};
use memoindex_bench::{
    load_dataset, run, run_scaling, synthetic_corpus, BenchError, Distribution, InsertOrder, Mix, Result,
    RunConfig, ScalingConfig, Stop, TargetKind, WorkloadSpec,
};

#[derive(Parser, Debug)]
#[command(name = "memoindex-bench", version, about = "Workload driver for the memoindex learned index")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time full versus memoized retraining as the key count grows.
    Scaling(ScalingArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Workload {
    YcsbD,
    YcsbE,
    Custom,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, value_enum, default_value = "ycsb-d")]
    workload: Workload,
    /// Ratios for the custom workload.
    #[arg(long, default_value_t = 0.95)]
    read: f64,
    #[arg(long, default_value_t = 0.05)]
    insert: f64,
    #[arg(long, default_value_t = 0.0)]
    delete: f64,
    #[arg(long, default_value_t = 0.0)]
    scan: f64,
    /// Request distribution; defaults to the workload's own.
    #[arg(long, value_enum)]
    dist: Option<Distribution>,
    /// Where new keys land; defaults to the workload's own.
    #[arg(long, value_enum)]
    insert_order: Option<InsertOrder>,
    /// Keys bulk loaded before the run (ignored with --dataset).
    #[arg(long, default_value_t = 1_000_000)]
    keys: usize,
    #[arg(long, default_value_t = 16)]
    key_len: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, conflicts_with = "duration")]
    ops: Option<u64>,
    /// Run length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, value_enum, default_value = "learned")]
    target: TargetKind,
    /// inline, parallel:K or delay:MS
    #[arg(long, default_value = "inline")]
    backend: EngineBackend,
    /// Newline-delimited key file used instead of the synthetic corpus.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output prefix; writes PREFIX.summary.csv and PREFIX.retrains.csv.
    #[arg(long, default_value = "memoindex")]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    max_scan: usize,
    /// Buffered keys per leaf that trigger a retrain.
    #[arg(long)]
    max_buffer: Option<usize>,
    /// Keys per leaf at bulk load.
    #[arg(long)]
    leaf_size: Option<usize>,
    /// Seconds between lazy-delete sweeps; off when absent.
    #[arg(long)]
    cold_interval: Option<f64>,
}

#[derive(Args, Debug)]
struct ScalingArgs {
    #[arg(long, default_value_t = 96)]
    key_len: usize,
    #[arg(long, default_value_t = 100_000)]
    delta: usize,
    /// Total key counts after each retrain.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1_000_000usize, 10_000_000])]
    checkpoints: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value = "memoindex")]
    out: PathBuf,
}

fn seconds(name: &str, s: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(s).map_err(|_| BenchError::Config(format!("--{name} {s} is not a valid duration")))
}

fn workload_spec(a: &RunArgs) -> Result<WorkloadSpec> {
    let mut spec = match a.workload {
        Workload::YcsbD => WorkloadSpec::ycsb_d(a.keys, a.key_len),
        Workload::YcsbE => WorkloadSpec::ycsb_e(a.keys, a.key_len),
        Workload::Custom => WorkloadSpec::custom(
            Mix { read: a.read, insert: a.insert, delete: a.delete, scan: a.scan },
            Distribution::Uniform,
            a.keys,
            a.key_len,
        ),
    };
    if let Some(d) = a.dist {
        spec.distribution = d;
    }
    if let Some(o) = a.insert_order {
        spec.insert_order = o;
    }
    spec.threads = a.threads;
    spec.seed = a.seed;
    spec.max_scan = a.max_scan;
    spec.stop = match (a.ops, a.duration) {
        (Some(n), _) => Stop::Ops(n),
        (None, Some(s)) => Stop::Duration(seconds("duration", s)?),
        (None, None) => Stop::Ops(1_000_000),
    };
    Ok(spec)
}

fn run_workload(a: &RunArgs) -> Result<()> {
    a.backend.validate()?;
    let mut spec = workload_spec(a)?;
    let corpus = match &a.dataset {
        Some(path) => {
            let d = load_dataset(path, a.key_len)?;
            if d.truncated > 0 {
                eprintln!("warning: {} keys truncated to {} bytes", d.truncated, a.key_len);
            }
            d.keys
        }
        None => synthetic_corpus(a.keys, a.key_len, a.seed)?,
    };
    spec.initial_keys = corpus.len();
    spec.validate()?;

    let mut cfg = RunConfig::new(spec, a.target);
    cfg.backend = a.backend;
    cfg.index = IndexConfig {
        max_buffer: a.max_buffer.unwrap_or(cfg.index.max_buffer),
        target_leaf_size: a.leaf_size.unwrap_or(cfg.index.target_leaf_size),
        ..cfg.index
    };
    cfg.cold_interval = a.cold_interval.map(|s| seconds("cold-interval", s)).transpose()?;

    let report = run(&cfg, &corpus)?;
    let (summary, retrains) = report_csv(&report, &a.out)?;
    println!(
        "{} {} {}: {} ops in {:.3} s, {:.0} ops/s, {} retrains, {} bytes of index memory",
        report.target,
        report.backend,
        report.workload,
        report.ops,
        report.elapsed.as_secs_f64(),
        report.throughput,
        report.retrain_log.len(),
        report.memory.total()
    );
    println!("wrote {} and {}", summary.display(), retrains.display());
    Ok(())
}

fn run_scaling_cmd(a: &ScalingArgs) -> Result<()> {
    let cfg = ScalingConfig {
        key_len: a.key_len,
        delta: a.delta,
        checkpoints: a.checkpoints.clone(),
        repeats: a.repeats,
        chunk_rows: 0,
    };
    let points = run_scaling(&cfg)?;
    for p in &points {
        println!("{:>10} keys  memoized {:>10.1} ms  full {:>10.1} ms", p.total_keys, p.memo_ms, p.full_ms);
    }
    let path = scaling_path(&a.out);
    scaling_csv(&points, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Some(Command::Scaling(a)) => run_scaling_cmd(a),
        None => run_workload(&cli.run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
