use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fibresplit_cli::{run, Command, Overrides, DEFAULT_TOL_DYNAMIC, DEFAULT_TOL_STRUCTURAL};

/// Nonlinear splittings on fibre bundles: classification, lifts, induced
/// splittings, reduction and constrained dynamics from a model file.
#[derive(Debug, Parser)]
#[command(name = "fibresplit", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Model file (INI format).
    #[arg(long)]
    config: PathBuf,
    /// Directory for report.json and trajectory.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Overrides [simulation] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides [simulation] samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Bound for structural identities.
    #[arg(long, default_value_t = DEFAULT_TOL_STRUCTURAL)]
    tol_structural: f64,
    /// Bound for trajectory comparisons and sampled dynamic residuals.
    #[arg(long, default_value_t = DEFAULT_TOL_DYNAMIC)]
    tol_dynamic: f64,
    /// Overrides [simulation] dt.
    #[arg(long)]
    dt: Option<f64>,
    /// Overrides [simulation] t1.
    #[arg(long)]
    t1: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        samples: cli.samples,
        tol_structural: cli.tol_structural,
        tol_dynamic: cli.tol_dynamic,
        dt: cli.dt,
        t1: cli.t1,
    };
    let code = run(cli.command, &cli.config, &cli.out_dir, &overrides);
    ExitCode::from(code as u8)
}
