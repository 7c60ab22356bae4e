//! `atdoc` command-line tool: generate datasets, train single runs, run
//! ablation sweeps and aggregate reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod sweep;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use atdoc::data::{gen_gaussian_blobs_shift, gen_two_moons_shift, load_csv, save_csv, DomainDataset};
use atdoc::evalkit::report_csv;
use atdoc::io::write_atomic;
use atdoc::trainer::{run_with, RunOptions, TrainConfig};
use atdoc::{Error, RunResult};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

#[derive(Debug, Parser)]
#[command(name = "atdoc", version, about = "Memory-bank pseudo-labeling experiments on synthetic domain shift")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset CSV
    Generate {
        #[command(subcommand)]
        generator: Generator,
    },
    /// Train one configuration and write its RunResult JSON
    Train(TrainArgs),
    /// Run the cartesian grid of a sweep spec, one RunResult JSON per cell
    Sweep(SweepArgs),
    /// Aggregate a directory of RunResult JSONs into a CSV table
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
enum Generator {
    /// Two interleaved half-circles; the target is rotated about the origin
    TwoMoons {
        /// Samples per domain
        #[arg(long)]
        n: usize,
        /// Target rotation in degrees
        #[arg(long)]
        rotation: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Unit-variance Gaussian blobs; the target translates every mean
    Blobs {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        dim: usize,
        /// Samples per class and domain
        #[arg(long)]
        n: usize,
        /// Comma-separated shift vector of length `dim`
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        shift: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training config JSON
    #[arg(long)]
    config: PathBuf,
    /// Dataset CSV
    #[arg(long)]
    data: PathBuf,
    /// RunResult JSON to write
    #[arg(short, long)]
    output: PathBuf,
    /// Overrides the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Record 0 wall-clock seconds so the output is bitwise reproducible
    #[arg(long)]
    no_timing: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Sweep spec JSON: {"base": {config...}, "axes": {"key": [values...]}}
    #[arg(long)]
    spec: PathBuf,
    /// Dataset CSV shared by every cell
    #[arg(long)]
    data: PathBuf,
    /// Output directory (created if missing)
    #[arg(short, long)]
    output: PathBuf,
    /// Skip cells whose result file already exists and parses
    #[arg(long)]
    resume: bool,
    /// Cells run concurrently
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    no_timing: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory of RunResult JSONs
    #[arg(long)]
    dir: PathBuf,
    /// CSV to write
    #[arg(short, long)]
    output: PathBuf,
}

/// A failure tagged with its exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: 2, error: error.into() }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: 1, error: error.into() }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match cli.command {
        Command::Generate { generator } => cmd_generate(generator),
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => sweep::cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(anyhow!("{what} {} does not exist", path.display())))
    }
}

pub fn require_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            Err(Failure::usage(anyhow!("output directory {} does not exist", dir.display())))
        }
        _ => Ok(()),
    }
}

pub fn load_dataset(path: &Path) -> CliResult<DomainDataset> {
    load_csv(path).with_context(|| format!("reading dataset {}", path.display())).map_err(Failure::runtime)
}

/// Config errors (unknown or invalid keys) are usage errors.
pub fn config_failure(e: Error, source: &str) -> Failure {
    match e {
        Error::Config(_) => Failure::usage(anyhow!("invalid config {source}: {e}")),
        other => Failure::runtime(anyhow!("{source}: {other}")),
    }
}

fn cmd_generate(generator: Generator) -> CliResult<()> {
    let (ds, output) = match generator {
        Generator::TwoMoons { n, rotation, noise, seed, output } => {
            require_parent(&output)?;
            (gen_two_moons_shift(n, rotation, noise, seed).map_err(Failure::usage)?, output)
        }
        Generator::Blobs { classes, dim, n, shift, seed, output } => {
            require_parent(&output)?;
            let shift = if shift.is_empty() { vec![0.0; dim] } else { shift };
            (gen_gaussian_blobs_shift(classes, dim, n, &shift, seed).map_err(Failure::usage)?, output)
        }
    };
    save_csv(&ds, &output).map_err(Failure::runtime)?;
    println!(
        "wrote {}: {} source, {} target samples, {} classes, {} features",
        output.display(),
        ds.source().len(),
        ds.target_unlabeled().len(),
        ds.class_count(),
        ds.dim()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    require_file(&args.config, "config")?;
    require_file(&args.data, "dataset")?;
    require_parent(&args.output)?;
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))
        .map_err(Failure::usage)?;
    let mut config =
        TrainConfig::from_json(&text).map_err(|e| config_failure(e, &args.config.display().to_string()))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let ds = load_dataset(&args.data)?;
    info!("training {} (seed {}) for {} iterations", config.method.as_str(), config.seed, config.iterations);
    let result = run_with(&config, &ds, RunOptions { record_timing: !args.no_timing }).map_err(Failure::runtime)?;
    write_atomic(&args.output, result.to_json().as_bytes()).map_err(Failure::runtime)?;
    let acc = result.metrics.target_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    println!("{} seed {}: target accuracy {acc} -> {}", result.method.as_str(), result.seed, args.output.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> CliResult<()> {
    if !args.dir.is_dir() {
        return Err(Failure::usage(anyhow!("{} is not a directory", args.dir.display())));
    }
    require_parent(&args.output)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&args.dir)
        .and_then(|entries| entries.map(|e| e.map(|e| e.path())).collect())
        .with_context(|| format!("listing {}", args.dir.display()))
        .map_err(Failure::runtime)?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for path in &paths {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        match fs::read_to_string(path).map_err(Error::from).and_then(|t| RunResult::from_json(&t)) {
            Ok(r) => results.push(r),
            Err(e) => {
                warn!("skipping {name}: {e}");
                skipped.push(name);
            }
        }
    }
    if results.is_empty() {
        warn!("no readable run results in {}", args.dir.display());
    }
    write_atomic(&args.output, report_csv(&results, &skipped).as_bytes()).map_err(Failure::runtime)?;
    println!("{} runs, {} skipped -> {}", results.len(), skipped.len(), args.output.display());
    Ok(())
}
