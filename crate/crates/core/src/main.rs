use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use wdn_se::cli::{cmd_compare, cmd_estimate, cmd_simulate, RunManifest};
use wdn_se::solver::ObjectiveKind;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Objective {
    /// Weighted least squares (QP subproblems).
    Wls,
    /// Weighted absolute error (LP subproblems).
    Wabs,
}

impl From<Objective> for ObjectiveKind {
    fn from(o: Objective) -> Self {
        match o {
            Objective::Wls => ObjectiveKind::WeightedLeastSquares,
            Objective::Wabs => ObjectiveKind::WeightedAbsolute,
        }
    }
}

#[derive(Parser)]
#[command(name = "wdn-se", about = "Water distribution network state estimation", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate all heads and flows from head-difference measurements.
    Estimate {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Convergence threshold on consecutive iterates.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long = "max-iter")]
        max_iter: Option<usize>,
        /// Acceleration period.
        #[arg(long)]
        step: Option<usize>,
        /// Acceleration gain.
        #[arg(long)]
        accel: Option<f64>,
        /// Base of the exponential change of variables.
        #[arg(long)]
        base: Option<f64>,
        #[arg(long, value_enum)]
        objective: Option<Objective>,
        /// Number of time steps.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Solve the exact nonlinear hydraulics and write ground truth.
    Simulate {
        #[arg(long)]
        network: PathBuf,
        /// Optional measurement file; overrides fixed heads, and with
        /// head-difference entries present the multi-start oracle runs
        /// (seeded by WDN_SEED).
        #[arg(long)]
        measurements: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-variable comparison of an estimate against a truth file.
    Compare {
        estimate: PathBuf,
        truth: PathBuf,
        /// Directory for compare.csv (defaults to the estimate's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match args.command {
        Command::Estimate {
            network,
            measurements,
            out,
            threshold,
            max_iter,
            step,
            accel,
            base,
            objective,
            horizon,
        } => cmd_estimate(&RunManifest {
            network,
            measurements: Some(measurements),
            out_dir: out,
            threshold,
            max_iter,
            step,
            accel,
            base,
            objective: objective.map(Into::into),
            horizon,
        }),
        Command::Simulate {
            network,
            measurements,
            out,
        } => cmd_simulate(&RunManifest {
            network,
            measurements,
            out_dir: out,
            ..Default::default()
        }),
        Command::Compare {
            estimate,
            truth,
            out,
        } => {
            let out_dir = out.unwrap_or_else(|| {
                estimate
                    .parent()
                    .map(|p| p.to_path_buf())
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            cmd_compare(&estimate, &truth, &out_dir)
        }
    };
    ExitCode::from(code as u8)
}
