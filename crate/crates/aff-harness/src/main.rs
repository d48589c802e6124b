//! `aff` command line: dataset generation, the comparative experiment
//! runner, gradient checking, and single-cell evaluation.
//!
//! Exit codes: 0 success, 1 usage, 2 config or io error, 3 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use aff_core::data::{
    gen_graphs, gen_multisource, gen_shapes, gen_token_sentiment, save_edge_list,
    save_multisource_csv, MultiSourceSpec,
};
use aff_core::models::FusionMode;
use aff_harness::config::load_config;
use aff_harness::runner::{grad_check, run_experiment, run_single};
use aff_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(
    name = "aff",
    version,
    about = "Adaptive feature fusion experiments on synthetic tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it to a file.
    ///
    /// multisource writes CSV, graphs writes an edge list, images and
    /// sentiment write JSON.
    GenData {
        #[arg(long, value_enum)]
        task: TaskKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of samples.
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Run every configured (arm, seed) cell and write results.csv and
    /// report.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's out_dir, then ".".
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the adaptive arm's gradients on the
    /// configured task; exits 3 if the max relative error exceeds 1e-5.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train and evaluate a single (arm, seed) cell and print a JSON
    /// summary.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        arm: ArmKind,
        #[arg(long)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskKind {
    Multisource,
    Images,
    Sentiment,
    Graphs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArmKind {
    Aff,
    Concat,
    Add,
    Mul,
}

impl From<ArmKind> for FusionMode {
    fn from(arm: ArmKind) -> Self {
        match arm {
            ArmKind::Aff => FusionMode::Aff,
            ArmKind::Concat => FusionMode::Concat,
            ArmKind::Add => FusionMode::Add,
            ArmKind::Mul => FusionMode::Mul,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Writes one line to stdout. A broken pipe (the reader closed early, as
/// with `| head`) ends the process quietly; other write failures surface
/// as io errors.
fn emit(line: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out
        .write_all(line.as_bytes())
        .and_then(|()| out.write_all(b"\n"))
    {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        res => Ok(res?),
    }
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { task, out, seed, n } => {
            gen_data(task, &out, seed, n)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let out_dir = out
                .or_else(|| cfg.out_dir.clone().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            let report = run_experiment(&cfg, &out_dir)?;
            for agg in &report.aggregates {
                emit(&format!(
                    "{}: test accuracy {:.4} (std {:.4}), macro_f1 {:.4} (std {:.4}), {} seeds",
                    agg.arm.name(),
                    agg.accuracy_mean,
                    agg.accuracy_std,
                    agg.macro_f1_mean,
                    agg.macro_f1_std,
                    agg.seeds
                ))?;
            }
            emit(&format!("wrote {}", out_dir.join("results.csv").display()))?;
            emit(&format!("wrote {}", out_dir.join("report.json").display()))?;
            if report.failed_cells() > 0 {
                eprintln!(
                    "{} of {} cells failed",
                    report.failed_cells(),
                    report.results.len()
                );
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GradCheck { config } => {
            let cfg = load_config(&config)?;
            let rel = grad_check(&cfg)?;
            emit(&format!("max relative gradient error: {rel:e}"))?;
            if rel <= 1e-5 {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient check failed (tolerance 1e-5)");
                Ok(ExitCode::from(3))
            }
        }
        Command::Eval { config, arm, seed } => {
            let cfg = load_config(&config)?;
            let result = run_single(&cfg, arm.into(), seed)?;
            let json = serde_json::to_string_pretty(&result)
                .map_err(|e| HarnessError::Config(format!("serializing result: {e}")))?;
            emit(&json)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn gen_data(task: TaskKind, out: &Path, seed: u64, n: usize) -> Result<()> {
    if n == 0 {
        return Err(HarnessError::Config("--n must be at least 1".into()));
    }
    match task {
        TaskKind::Multisource => {
            let ds = gen_multisource(&MultiSourceSpec::new(n), seed)?;
            save_multisource_csv(&ds, out)?;
        }
        TaskKind::Images => {
            let ds = gen_shapes(n, seed)?;
            write_json(out, &ds)?;
        }
        TaskKind::Sentiment => {
            let ds = gen_token_sentiment(n, 12, 24, seed)?;
            write_json(out, &ds)?;
        }
        TaskKind::Graphs => {
            let ds = gen_graphs(n, 4, 8, seed)?;
            save_edge_list(&ds, out)?;
        }
    }
    emit(&format!("wrote {n} samples to {}", out.display()))?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string(value)
        .map_err(|e| HarnessError::Config(format!("serializing dataset: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}
