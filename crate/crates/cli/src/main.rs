//! Command-line surface over the segmentation-loop laboratory.
//!
//! Five subcommands cover the full workflow: `simulate` runs the
//! configured pipelines and writes trace directories, `metrics` expands
//! a trace into a per-record panel CSV, `compare` runs paired
//! permutation tests between two panels, `jacobian` probes the loop map
//! along a trajectory, and `correlate` relates panel metrics to
//! per-call IoU.
//!
//! Exit codes are a stable contract for scripting: 0 success, 2 config
//! or input-schema problems, 3 trace validation failures, 4 comparisons
//! with no overlapping pairs, 5 numerical failures, 1 anything else.

mod compare;
mod correlate;
mod jacobian;
mod metrics;
mod simulate;
mod table;

use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use segloop::experiment::ExperimentConfig;

#[derive(Parser)]
#[command(name = "segloop", version, about = "Closed-loop prompt-feedback segmentation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run configured pipelines and write one trace directory per method.
    Simulate(simulate::Args),
    /// Expand a trace directory into a per-record metric panel CSV.
    Metrics(metrics::Args),
    /// Compare two metric panels with paired permutation tests.
    Compare(compare::Args),
    /// Report loop-map spectral radii and error ratios along a trajectory.
    Jacobian(jacobian::Args),
    /// Correlate panel metrics against per-call IoU.
    Correlate(correlate::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => simulate::run(args),
        Command::Metrics(args) => metrics::run(args),
        Command::Compare(args) => compare::run(args),
        Command::Jacobian(args) => jacobian::run(args),
        Command::Correlate(args) => correlate::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// Maps the deepest library error in the chain onto the exit-code
/// contract; anything unrecognized is a generic failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    use segloop::Error::*;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<segloop::Error>() {
            return match e {
                InvalidConfig(_) | InvalidInput(_) => 2,
                TraceValidation(_) => 3,
                EmptyComparison => 4,
                NumericalFailure(_) | JacobianEval { .. } => 5,
                _ => 1,
            };
        }
    }
    1
}

/// Loads and validates an experiment config, keeping serde's
/// line/column diagnostics in the error message.
pub(crate) fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| segloop::Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
