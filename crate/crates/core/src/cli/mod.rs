//! Command-line front end: config loading, the five commands and their
//! output files.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use commands::{cmd_allocate, cmd_estimate, cmd_fixed_cost, cmd_ladder, cmd_rate_study, CostCounters, PointEstimate};
pub use config::{
    AllocationSpec, BudgetRequest, EvaluatorSpec, GeometricSpec, GridSpec, LadderSpec, MlpSource, OutputSpec,
    RandomMlp, RateSpec, RunConfig, SEED_ENV,
};

pub const ARTIFACT_VERSION: &str = concat!("mlmc-dropout ", env!("CARGO_PKG_VERSION"));
/// Bumped whenever a CSV or JSON schema changes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("numeric failure: {0}")]
    NonFinite(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::NonFinite(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

/// The files one command produces, in write order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn push(&mut self, name: &str, contents: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), contents.into()));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_slice())
    }
}

/// Settings that come from the invocation rather than the config.
#[derive(Debug, Clone)]
pub struct RunContext {
    /// Directory against which relative weight-file paths resolve.
    pub base_dir: PathBuf,
    /// Record elapsed time in the envelope. Off for byte-identical reruns.
    pub wall_clock: bool,
}

/// Common wrapper for `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEnvelope {
    pub artifact_version: String,
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    #[serde(default)]
    pub estimates: Vec<PointEstimate>,
    pub summary: serde_json::Value,
    pub cost: CostCounters,
    pub wall_clock_seconds: Option<f64>,
}

#[derive(Debug, Parser)]
#[command(name = "mlmc-dropout", version, about = "Multilevel Monte Carlo estimates of MC-dropout predictive moments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the MLMC estimators over the grid for every seed.
    Estimate(RunArgs),
    /// Single-fidelity variance decay against T, with log-log slope fits.
    RateStudy(RunArgs),
    /// Continuous and rounded optimal allocations for a budget.
    Allocate(RunArgs),
    /// Variance surface over every allocation of a fixed cost.
    FixedCost(RunArgs),
    /// Build and inspect a fidelity ladder.
    Ladder(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Parent directory for the run directory; overrides `output.dir`.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Name the run directory after the command only and omit wall-clock
    /// time, so reruns are byte-identical.
    #[arg(long)]
    pub no_timestamp: bool,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Estimate(_) => "estimate",
            Command::RateStudy(_) => "rate-study",
            Command::Allocate(_) => "allocate",
            Command::FixedCost(_) => "fixed-cost",
            Command::Ladder(_) => "ladder",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Estimate(a)
            | Command::RateStudy(a)
            | Command::Allocate(a)
            | Command::FixedCost(a)
            | Command::Ladder(a) => a,
        }
    }
}

/// Runs one command to completion and returns the run directory.
pub fn run(command: &Command, seed_override: Option<&str>) -> Result<PathBuf, CliError> {
    let args = command.args();
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let mut config = RunConfig::from_toml(&text)?;
    config.apply_seed_override(seed_override)?;
    let ctx = RunContext {
        base_dir: args.config.parent().map(Path::to_path_buf).unwrap_or_default(),
        wall_clock: !args.no_timestamp,
    };
    let artifacts = match command {
        Command::Estimate(_) => cmd_estimate(&config, &ctx)?,
        Command::RateStudy(_) => cmd_rate_study(&config, &ctx)?,
        Command::Allocate(_) => cmd_allocate(&config, &ctx)?,
        Command::FixedCost(_) => cmd_fixed_cost(&config, &ctx)?,
        Command::Ladder(_) => cmd_ladder(&config, &ctx)?,
    };
    let parent = args.out.clone().unwrap_or_else(|| config.output_dir());
    let dir = if args.no_timestamp {
        parent.join(command.name())
    } else {
        parent.join(format!("{}-{}", command.name(), chrono::Local::now().format("%Y%m%dT%H%M%S%.3f")))
    };
    write_run(&dir, &text, &artifacts)?;
    Ok(dir)
}

/// Writes the config copy and every artifact into `dir`.
pub fn write_run(dir: &Path, config_text: &str, artifacts: &Artifacts) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), config_text)?;
    for (name, contents) in &artifacts.files {
        std::fs::write(dir.join(name), contents)?;
    }
    Ok(())
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = std::env::var(SEED_ENV).ok();
    match run(&cli.command, seed.as_deref()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mlmc-dropout {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}

pub(crate) fn elapsed(ctx: &RunContext, start: Instant) -> Option<f64> {
    ctx.wall_clock.then(|| start.elapsed().as_secs_f64())
}
