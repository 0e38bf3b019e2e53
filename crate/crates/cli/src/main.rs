//! `gsc`: batch runner for spatially-coupled system experiments.
//!
//! Exit status: 0 on success, 1 when a check fails or a computation aborts,
//! 2 on a configuration error.

// Negated comparisons are how NaN gets rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod report;

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Compute(#[from] gsc_core::GscError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Compute(gsc_core::GscError::InvalidParameter { .. }) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "gsc",
    version,
    about = "Run spatially-coupled system experiments"
)]
struct Cli {
    /// JSON configuration file (`-` reads standard input).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all available).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seed for sampling-based checks.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Option<Sub>,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Fixed points, their stability and potentials.
    FixedPoints(FixedPointsArgs),
    /// BP or potential threshold of a regular ensemble by bisection.
    Threshold(ThresholdArgs),
    /// Coupled iteration on a lattice.
    GscRun(GscRunArgs),
    /// Gradient-flow integration of the continuum model.
    PdeRun(PdeRunArgs),
    /// Conservation-law drift of a stationary one-dimensional profile.
    ConservationCheck(ConservationArgs),
    /// Invariant suite over the shipped models.
    Verify(VerifyArgs),
}

#[derive(Args, Serialize, Debug)]
struct FixedPointsArgs {
    /// `regular_bec:l,r,eps`
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    profile_points: Option<usize>,
}

#[derive(Args, Serialize, Debug)]
struct ThresholdArgs {
    /// `regular_bec:l,r`
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    /// `bp` or `potential`
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    de_iterations: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<usize>,
}

#[derive(Args, Serialize, Debug)]
struct GscRunArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    l: Option<i64>,
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    w: Option<i64>,
    /// `all_bad` or `all_good`
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    init: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_iters: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    stop_eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    snapshot_every: Option<u64>,
}

#[derive(Args, Serialize, Debug)]
struct PdeRunArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dt: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    init: Option<String>,
    /// `v_affine` or `u_affine`
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    chart: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    stop_eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    snapshot_every: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    record_every: Option<usize>,
}

#[derive(Args, Serialize, Debug)]
struct ConservationArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    stop_eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    refine: Option<bool>,
}

#[derive(Args, Serialize, Debug)]
struct VerifyArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
}

impl Sub {
    fn name_and_overrides(&self) -> (&'static str, Value) {
        let to = |v: Result<Value, serde_json::Error>| v.expect("flag values serialize");
        match self {
            Sub::FixedPoints(a) => ("fixed-points", to(serde_json::to_value(a))),
            Sub::Threshold(a) => ("threshold", to(serde_json::to_value(a))),
            Sub::GscRun(a) => ("gsc-run", to(serde_json::to_value(a))),
            Sub::PdeRun(a) => ("pde-run", to(serde_json::to_value(a))),
            Sub::ConservationCheck(a) => ("conservation-check", to(serde_json::to_value(a))),
            Sub::Verify(a) => ("verify", to(serde_json::to_value(a))),
        }
    }
}

fn load(cli: &Cli) -> Result<Map<String, Value>, CliError> {
    let mut map = match &cli.config {
        None => Map::new(),
        Some(path) => {
            let text = if path.as_os_str() == "-" {
                let mut s = String::new();
                std::io::stdin()
                    .read_to_string(&mut s)
                    .map_err(|e| CliError::io(path, e))?;
                s
            } else {
                std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            };
            config::parse_document(&text)?
        }
    };
    if let Some(sub) = &cli.command {
        let (name, overrides) = sub.name_and_overrides();
        map.insert("command".into(), Value::from(name));
        if let Value::Object(o) = overrides {
            map.extend(o);
        }
    }
    if let Some(out) = &cli.out {
        map.insert(
            "out".into(),
            Value::from(out.to_string_lossy().into_owned()),
        );
    }
    if let Some(seed) = cli.seed {
        map.insert("seed".into(), Value::from(seed));
    }
    if let Some(w) = cli.workers {
        map.insert("workers".into(), Value::from(w));
    }
    Ok(map)
}

fn execute(cli: &Cli) -> Result<bool, CliError> {
    let mut cfg = config::resolve(load(cli)?)?;
    if let Some(n) = cfg.common.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("key `workers`: {e}")))?;
    }
    commands::run(&mut cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gsc: one or more checks failed; see summary.json");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("gsc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
