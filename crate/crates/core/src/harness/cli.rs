use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::config::{parse_config, parse_sweep_values};
use super::export::to_long_format;
use super::run::run_to_dir;
use super::selfcheck;
use super::sweep::{plan_sweep, run_sweep};
use crate::error::Error;
use crate::federation::read_metrics;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const THREADS_ENV: &str = "HYPERFED_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hyperfed", version, about = "Personalized federated learning simulator with uncertainty estimation and hypergraph label refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment (or one per seed).
    Run(ExperimentArgs),
    /// Cartesian sweep over `--set KEY=[a,b,..]` lists.
    Sweep(ExperimentArgs),
    /// Run the built-in invariant suite.
    Check,
    /// Reshape a metrics CSV into long format.
    ExportPlot {
        /// Input metrics.csv.
        metrics: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

fn classify(e: Error) -> Failure {
    match e {
        Error::Config { .. } | Error::Csv { .. } | Error::LabelOutOfRange { .. } => Failure::Validation(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    }
}

/// Worker count from the environment; `None` leaves rayon's default.
pub fn thread_cap() -> Result<Option<usize>, String> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got `{v}`")),
        },
    }
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = match thread_cap() {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_VALIDATION;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_RUNTIME;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            EXIT_VALIDATION
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Check => check(),
        Command::ExportPlot { metrics, out } => export(metrics, out),
    }
}

fn run(a: ExperimentArgs) -> Result<(), Failure> {
    if let Some(s) = a.sets.iter().find(|s| s.split_once('=').is_some_and(|(_, v)| parse_sweep_values(v).len() > 1)) {
        return Err(Failure::Validation(format!("`{s}` lists several values; use `sweep`")));
    }
    if a.seeds > 1 {
        return sweep(a);
    }
    if a.seeds == 0 {
        return Err(Failure::Validation("--seeds must be at least 1".into()));
    }
    let cfg = parse_config(a.config.as_deref(), &a.sets).map_err(classify)?;
    run_to_dir(&cfg, &a.out).map_err(classify)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn sweep(a: ExperimentArgs) -> Result<(), Failure> {
    let plan = plan_sweep(a.config.as_deref(), &a.sets, a.seeds).map_err(classify)?;
    let table = run_sweep(&plan, &a.out).map_err(|e| Failure::Runtime(e.to_string()))?;
    print!("{}", table.to_csv());
    println!("wrote {} runs under {}", plan.len(), a.out.display());
    Ok(())
}

fn check() -> Result<(), Failure> {
    let results = selfcheck::run_all();
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Validation(format!("{failed} of {} checks failed", results.len())))
    }
}

fn export(metrics: PathBuf, out: Option<PathBuf>) -> Result<(), Failure> {
    let rows = read_metrics(&metrics).map_err(classify)?;
    let text = to_long_format(&rows);
    match out {
        Some(p) => std::fs::write(&p, text).map_err(|e| Failure::Runtime(e.to_string())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
