//! Command-line experiment driver.
//!
//! Every command reads an optional JSON config (unknown keys rejected), runs
//! one experiment and writes `report.json` plus plot-ready CSV tables into the
//! output directory. Exit status is 0 when every check passes, 1 when some
//! check fails and 2 on configuration or I/O errors.

mod commands;
mod output;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

pub use commands::McCompare;
pub use output::{compact, Check};

#[derive(Debug, Parser)]
#[command(name = "intrinsic-filter", version, about = "Intrinsic filtering experiments and convergence checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default `out/<command>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the parallel sections.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Exponential-map order and curvature identities.
    CheckGeometry,
    /// Jacobi-field endpoint and ζ-derivative orders.
    CheckJacobi,
    /// Residual orders at the corrected and naive barycentres.
    CheckBarycentre,
    /// Weak-approximation contract and binned variances.
    CheckConditional,
    /// Multi-step filter on one simulated path.
    RunFilter,
    /// Update, EKF and oracle on the γ ladder.
    McCompare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::CheckGeometry => "check-geometry",
            Command::CheckJacobi => "check-jacobi",
            Command::CheckBarycentre => "check-barycentre",
            Command::CheckConditional => "check-conditional",
            Command::RunFilter => "run-filter",
            Command::McCompare => "mc-compare",
        }
    }
}

/// Outcome of a completed command.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub(crate) fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<Outcome> {
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out").join(cli.command.name()));
    let run = || commands::run(cli.command, cli.config.as_deref(), cli.seed, &out_dir);
    let checks = match cli.threads {
        None => run()?,
        Some(0) => return Err(Error::Config("--threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?,
    };
    Ok(Outcome { out_dir, checks })
}

/// Entry point of the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(outcome) => {
            for c in &outcome.checks {
                println!("{} {} = {} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, compact(c.value), c.threshold);
            }
            println!("wrote {}", outcome.out_dir.display());
            if outcome.passed() {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
