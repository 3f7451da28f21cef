//! Command-line front end: inspect a data file, run one tracker, or sweep.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use halftrack::bench::{
    emit_csv, emit_plot_series, run_experiment, DatasetSource, ExperimentSpec, ReferenceTable,
};
use halftrack::dataio::{load_orlib, split, to_returns, Layout};
use halftrack::pipeline::{track, Model};
use halftrack::portfolio::{Bounds, InitialPoint, LambdaRule, TrackerConfig};

#[derive(Parser, Debug)]
#[command(
    name = "halftrack",
    version,
    about = "Sparse index tracking with half thresholding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a price file and print its dimensions and summary statistics
    Parse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = Layout::default())]
        layout: Layout,
    },
    /// Fit one model at one K and write the result as JSON
    Run(RunArgs),
    /// Run a (dataset x K x model x seed) grid and write CSV
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct TrackerArgs {
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// Number of return periods in the training block (default: half)
    #[arg(long)]
    split_count: Option<usize>,
    #[arg(long, default_value_t = LambdaRule::Recompute)]
    rule: LambdaRule,
    /// Starting point of the thresholding iteration: uniform or seeded-random
    #[arg(long, default_value = "uniform")]
    init: InitialPoint,
    /// Repeat the selection once, warm-started from the fitted weights
    #[arg(long)]
    refine: bool,
}

impl TrackerArgs {
    fn config(&self, k: usize, seed: u64) -> halftrack::Result<TrackerConfig> {
        let mut cfg = TrackerConfig::with_k(k);
        cfg.bounds = Bounds::new(self.eta, self.delta)?;
        cfg.epsilon = self.epsilon;
        cfg.rule = self.rule;
        cfg.init = self.init;
        cfg.refine = self.refine;
        cfg.seed = seed;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = Layout::default())]
    layout: Layout,
    #[arg(long, default_value = "l12")]
    model: Model,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    tracker: TrackerArgs,
    /// Destination for the JSON record (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Comma-separated data files
    #[arg(long, value_delimiter = ',', required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = Layout::default())]
    layout: Layout,
    #[arg(long, default_value_t = 5)]
    k_min: usize,
    #[arg(long, default_value_t = 10)]
    k_max: usize,
    #[arg(long, value_delimiter = ',', default_value = "l12,l1")]
    models: Vec<Model>,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    plot_dir: Option<PathBuf>,
    /// Reference constants file; `builtin` selects the shipped table
    #[arg(long)]
    reference: Option<String>,
    /// Baseline sources for SupO, tried in order
    #[arg(long, value_delimiter = ',', default_value = "torrubiano,l1")]
    baseline: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "42")]
    seeds: Vec<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Fill the runtime_ms column (output is then no longer reproducible)
    #[arg(long)]
    timings: bool,
    #[command(flatten)]
    tracker: TrackerArgs,
}

fn parse_cmd(input: PathBuf, layout: Layout) -> halftrack::Result<()> {
    let panel = load_orlib(&input, layout)?;
    let data = to_returns(&panel);
    let idx = &data.index_returns;
    let mean = idx.mean();
    let sd = (idx.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (idx.len() - 1) as f64).sqrt();
    println!("source: {}", panel.source_name);
    println!("layout: {layout}");
    println!("N: {}", panel.n_stocks());
    println!("T_p: {}", panel.n_periods());
    println!("return periods: {}", data.n_periods());
    println!("index return mean: {mean:.6e}");
    println!("index return std: {sd:.6e}");
    println!("index return min: {:.6e}", idx.min());
    println!("index return max: {:.6e}", idx.max());
    Ok(())
}

fn run_cmd(a: RunArgs) -> halftrack::Result<()> {
    let cfg = a.tracker.config(a.k, a.seed)?;
    let data = to_returns(&load_orlib(&a.data, a.layout)?);
    let train = a.tracker.split_count.unwrap_or(data.n_periods() / 2);
    let data = split(&data, train)?;
    let result = track(a.model, &data, &cfg)?;
    let json = serde_json::to_string_pretty(&result)
        .map_err(|e| halftrack::Error::Validation(format!("serialization failed: {e}")))?;
    match a.out {
        Some(p) => {
            std::fs::write(&p, json + "\n")?;
            println!(
                "{} k={} support={:?} tei={:.5e} teo={:.5e} cons={:.5e}",
                result.model, result.k, result.support, result.tei, result.teo, result.cons
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

/// Returns whether any cell failed.
fn sweep_cmd(a: SweepArgs) -> halftrack::Result<bool> {
    if a.k_min > a.k_max {
        return Err(halftrack::Error::Validation(format!(
            "k-min {} exceeds k-max {}",
            a.k_min, a.k_max
        )));
    }
    let datasets = a
        .data
        .iter()
        .map(|p| DatasetSource {
            path: p.clone(),
            layout: a.layout,
        })
        .collect();
    let mut spec = ExperimentSpec::new(datasets, (a.k_min..=a.k_max).collect(), a.models.clone());
    spec.cfg = a
        .tracker
        .config(a.k_min, a.seeds.first().copied().unwrap_or(42))?;
    spec.split_count = a.tracker.split_count;
    spec.seeds = a.seeds.clone();
    spec.jobs = a.jobs;
    spec.timings = a.timings;
    spec.baselines = a.baseline.clone();
    spec.reference = match a.reference.as_deref() {
        None => None,
        Some("builtin") => Some(ReferenceTable::builtin()),
        Some(p) => Some(ReferenceTable::load(p.as_ref())?),
    };
    let rows = run_experiment(&spec)?;
    emit_csv(&rows, &a.csv)?;
    if let Some(dir) = &a.plot_dir {
        emit_plot_series(&rows, dir)?;
    }
    let failed: Vec<_> = rows.iter().filter(|r| r.is_error()).collect();
    for r in &failed {
        eprintln!(
            "cell failed: {} k={} {}: {}",
            r.dataset,
            r.k,
            r.model,
            r.error.as_deref().unwrap_or("")
        );
    }
    println!("wrote {} rows to {}", rows.len(), a.csv.display());
    Ok(!failed.is_empty())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HALFTRACK_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Parse { input, layout } => parse_cmd(input, layout).map(|_| false),
        Command::Run(a) => run_cmd(a).map(|_| false),
        Command::Sweep(a) => sweep_cmd(a),
    };
    match outcome {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
