//! Config-driven front end for `fibresplit`.
//!
//! Each run reads one model file, executes one command and writes
//! `report.json` (plus `trajectory.csv` for integrating commands) into the
//! output directory. Exit codes: 0 success, 1 failed verification, 2 config
//! error, 3 numerical failure.

pub mod commands;
pub mod config;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ValueEnum;
use fibresplit::numerics::TrajectoryRecord;
use fibresplit::sampling::SampleSpec;
use fibresplit::Error;
use thiserror::Error as ThisError;

use commands::Context;
use config::{load_config, ConfigError};
use report::{sha256_hex, trajectory_csv, Report};

pub const DEFAULT_TOL_STRUCTURAL: f64 = 1e-9;
pub const DEFAULT_TOL_DYNAMIC: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Classify,
    LiftCurve,
    Induce,
    Subduce,
    ProjectVerify,
    ElSimulate,
    NhSimulate,
    MagneticSimulate,
    Curvature,
    Unreduce,
    CheckAll,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Classify => "classify",
            Command::LiftCurve => "lift-curve",
            Command::Induce => "induce",
            Command::Subduce => "subduce",
            Command::ProjectVerify => "project-verify",
            Command::ElSimulate => "el-simulate",
            Command::NhSimulate => "nh-simulate",
            Command::MagneticSimulate => "magnetic-simulate",
            Command::Curvature => "curvature",
            Command::Unreduce => "unreduce",
            Command::CheckAll => "check-all",
        }
    }
}

#[derive(Debug, ThisError)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("invalid model: {0}")]
    Model(Error),
    #[error("numerical failure: {0}")]
    Numerical(Error),
    #[error("verification failed: {0}")]
    Verification(Error),
    #[error("cannot write output: {0}")]
    Io(String),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            e if e.is_numerical() => RunError::Numerical(e),
            e @ (Error::Syntax { .. }
            | Error::UnknownIdentifier { .. }
            | Error::Arity { .. }
            | Error::DimensionMismatch(_)
            | Error::InvalidInput(_)) => RunError::Model(e),
            e => RunError::Verification(e),
        }
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Model(_) | RunError::Io(_) => 2,
            RunError::Numerical(_) => 3,
            RunError::Verification(_) => 1,
        }
    }
}

/// Command-line settings that take precedence over the file.
#[derive(Debug, Clone, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub tol_structural: f64,
    pub tol_dynamic: f64,
    pub dt: Option<f64>,
    pub t1: Option<f64>,
}

impl Default for Overrides {
    fn default() -> Self {
        Self {
            seed: None,
            samples: None,
            tol_structural: DEFAULT_TOL_STRUCTURAL,
            tol_dynamic: DEFAULT_TOL_DYNAMIC,
            dt: None,
            t1: None,
        }
    }
}

/// Result of a run before anything is written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub trajectory: Option<TrajectoryRecord>,
}

impl RunOutput {
    pub fn exit_code(&self) -> i32 {
        if self.report.passed() {
            0
        } else {
            1
        }
    }
}

/// Loads the model and runs `command` without touching the filesystem otherwise.
pub fn execute(command: Command, config_path: &Path, overrides: &Overrides) -> Result<RunOutput, RunError> {
    let bytes = std::fs::read(config_path).map_err(|e| ConfigError::Io {
        path: config_path.display().to_string(),
        message: e.to_string(),
    })?;
    let cfg = load_config(config_path)?;
    let mut sim = cfg.simulation.clone();
    if let Some(seed) = overrides.seed {
        sim.seed = seed;
    }
    if let Some(samples) = overrides.samples {
        sim.samples = samples;
    }
    if let Some(dt) = overrides.dt {
        sim.dt = dt;
    }
    if let Some(t1) = overrides.t1 {
        sim.t1 = t1;
    }
    let samples = SampleSpec::new(sim.samples, sim.seed).with_box(sim.lo, sim.hi);
    let mut report = Report {
        command: command.name().to_string(),
        config_hash: sha256_hex(&bytes),
        seed: sim.seed,
        samples: sim.samples,
        ..Report::default()
    };
    report.tolerances.insert("structural".into(), overrides.tol_structural);
    report.tolerances.insert("dynamic".into(), overrides.tol_dynamic);
    let ctx = Context {
        cfg,
        samples,
        sim,
        tol_structural: overrides.tol_structural,
        tol_dynamic: overrides.tol_dynamic,
    };
    let run = match command {
        Command::Classify => commands::classify_cmd,
        Command::LiftCurve => commands::lift_curve,
        Command::Induce => commands::induce,
        Command::Subduce => commands::subduce_cmd,
        Command::ProjectVerify => commands::project_verify,
        Command::ElSimulate => commands::el_simulate,
        Command::NhSimulate => commands::nh_simulate,
        Command::MagneticSimulate => commands::magnetic_simulate,
        Command::Curvature => commands::curvature,
        Command::Unreduce => commands::unreduce_cmd,
        Command::CheckAll => commands::check_all,
    };
    let trajectory = run(&ctx, &mut report)?;
    if let Some(rec) = &trajectory {
        report.value("steps", serde_json::Value::from(rec.len().saturating_sub(1)));
        report.value("dt", report::real(ctx.sim.dt));
        report.value("t1", report::real(ctx.sim.t1));
    }
    Ok(RunOutput { report, trajectory })
}

pub fn write_outputs(out: &RunOutput, out_dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let io = |e: std::io::Error| RunError::Io(e.to_string());
    std::fs::create_dir_all(out_dir).map_err(io)?;
    let mut written = Vec::new();
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, out.report.to_json_string()).map_err(io)?;
    written.push(report_path);
    if let Some(rec) = &out.trajectory {
        let csv_path = out_dir.join("trajectory.csv");
        std::fs::write(&csv_path, trajectory_csv(rec)).map_err(io)?;
        written.push(csv_path);
    }
    Ok(written)
}

/// Runs a command end to end and returns the process exit code.
pub fn run(command: Command, config_path: &Path, out_dir: &Path, overrides: &Overrides) -> i32 {
    let start = Instant::now();
    let result = execute(command, config_path, overrides).and_then(|out| {
        write_outputs(&out, out_dir)?;
        Ok(out)
    });
    let code = match result {
        Ok(out) => {
            print!("{}", out.report.table());
            out.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    eprintln!("{} finished in {:.3} s", command.name(), start.elapsed().as_secs_f64());
    code
}
