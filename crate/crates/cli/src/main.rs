//! `torusbif` command-line front-end.
//!
//! Exit codes: 0 success, 1 configuration or argument error, 2 degenerate
//! classification, 3 pipeline-stage failure. Only the output file path is
//! written to stdout.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::commands::SectionArgs;
use crate::config::AnalysisConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at {0}")]
    Schema(String),
    #[error("degenerate classification: {0}")]
    Degenerate(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
    #[error("output stage failed: {0}")]
    Output(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Schema(_) => 1,
            CliError::Degenerate(_) => 2,
            CliError::Stage { .. } | CliError::Output(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "torusbif", version, about = "Averaging-based torus bifurcation analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory; overrides `outputs.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Averaged functions, Hopf point, critical curve, coefficients and certificates.
    Analyze {
        #[arg(long)]
        config: PathBuf,
    },
    /// Section points of one orbit.
    Section {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        mu: f64,
        #[arg(long)]
        eps: f64,
        /// `x,y` or `x,y,z`.
        #[arg(long, allow_hyphen_values = true)]
        start: String,
        #[arg(long)]
        n: usize,
        /// Iterate the inverse map.
        #[arg(long)]
        backward: bool,
    },
    /// Grid of `μ` by `ε` cells.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_start(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| CliError::Schema(format!("--start: {e}"))))
        .collect()
}

/// Returns the written path and whether to exit with the degenerate code.
fn run(cli: Cli) -> Result<(PathBuf, bool), CliError> {
    let config_path = match &cli.command {
        Command::Analyze { config } | Command::Section { config, .. } | Command::Sweep { config } => config,
    };
    let config = AnalysisConfig::load(config_path)?;
    let out = cli.out.clone().unwrap_or_else(|| config.outputs.dir.clone());
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(CliError::Schema("--jobs: must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Output(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Analyze { .. } => commands::cmd_analyze(&config, &out),
        Command::Section {
            mu, eps, start, n, backward, ..
        } => {
            let args = SectionArgs {
                mu,
                eps,
                start: parse_start(&start)?,
                n,
                backward,
            };
            commands::cmd_section(&config, &args, &out).map(|p| (p, false))
        }
        Command::Sweep { .. } => commands::cmd_sweep(&config, &out).map(|p| (p, false)),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok((path, degenerate)) => {
            println!("{}", path.display());
            if degenerate {
                eprintln!("degenerate classification: all fitted coefficients are below their residual floor");
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
