//! Experiment configuration: a strict JSON document, optionally overlaid with
//! command-line flags.

use std::path::PathBuf;

use gsc_core::ModelSpec;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    FixedPoints,
    Threshold,
    GscRun,
    PdeRun,
    ConservationCheck,
    Verify,
}

/// Keys shared by every command.
#[derive(Clone, Debug, Serialize)]
pub struct Common {
    pub command: Command,
    pub out: PathBuf,
    pub seed: u64,
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointsConfig {
    pub model: ModelSpec,
    /// Seed grid points per axis; defaults by model dimension.
    #[serde(default)]
    pub grid: Option<usize>,
    #[serde(default = "default_profile_points")]
    pub profile_points: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyType {
    RegularBec,
}

/// A model family scanned over its channel parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    #[serde(rename = "type")]
    pub family: FamilyType,
    pub l: u32,
    pub r: u32,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Bp,
    Potential,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    pub model: FamilySpec,
    pub kind: Kind,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_de_iterations")]
    pub de_iterations: usize,
    #[serde(default = "default_threshold_grid")]
    pub grid: usize,
    #[serde(default = "default_profile_points")]
    pub profile_points: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    AllBad,
    AllGood,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GscRunConfig {
    pub model: ModelSpec,
    pub k: usize,
    pub l: usize,
    pub w: usize,
    #[serde(default = "default_init")]
    pub init: InitKind,
    #[serde(default = "default_max_iters")]
    pub max_iters: u64,
    #[serde(default = "default_lattice_stop")]
    pub stop_eps: f64,
    /// Write a binary snapshot every this many iterations (0 disables).
    #[serde(default)]
    pub snapshot_every: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    VAffine,
    UAffine,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeRunConfig {
    pub model: ModelSpec,
    pub k: usize,
    pub n: usize,
    pub m: f64,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_init")]
    pub init: InitKind,
    #[serde(default = "default_chart")]
    pub chart: ChartKind,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_pde_stop")]
    pub stop_eps: f64,
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConservationConfig {
    pub model: ModelSpec,
    pub n: usize,
    pub m: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_conservation_stop")]
    pub stop_eps: f64,
    /// Also solve on the refined grid `2n − 1` and compare drifts.
    #[serde(default = "default_true")]
    pub refine: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Restrict the suite to one model; all shipped models otherwise.
    #[serde(default)]
    pub model: Option<ModelSpec>,
}

fn default_profile_points() -> usize {
    201
}
fn default_tol() -> f64 {
    1e-3
}
fn default_de_iterations() -> usize {
    10_000
}
fn default_threshold_grid() -> usize {
    1001
}
fn default_init() -> InitKind {
    InitKind::AllBad
}
fn default_max_iters() -> u64 {
    100_000
}
fn default_lattice_stop() -> f64 {
    1e-10
}
fn default_chart() -> ChartKind {
    ChartKind::VAffine
}
fn default_steps() -> usize {
    1_000_000
}
fn default_pde_stop() -> f64 {
    1e-10
}
fn default_conservation_stop() -> f64 {
    1e-12
}
fn default_record_every() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug)]
pub enum Params {
    FixedPoints(FixedPointsConfig),
    Threshold(ThresholdConfig),
    GscRun(GscRunConfig),
    PdeRun(PdeRunConfig),
    Conservation(ConservationConfig),
    Verify(VerifyConfig),
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub common: Common,
    pub params: Params,
}

impl ExperimentConfig {
    /// The resolved configuration as one flat JSON object.
    pub fn echo(&self) -> Value {
        let mut obj = match serde_json::to_value(&self.common).expect("serializable") {
            Value::Object(m) => m,
            _ => unreachable!(),
        };
        let params = match &self.params {
            Params::FixedPoints(p) => serde_json::to_value(p),
            Params::Threshold(p) => serde_json::to_value(p),
            Params::GscRun(p) => serde_json::to_value(p),
            Params::PdeRun(p) => serde_json::to_value(p),
            Params::Conservation(p) => serde_json::to_value(p),
            Params::Verify(p) => serde_json::to_value(p),
        }
        .expect("serializable");
        if let Value::Object(m) = params {
            obj.extend(m);
        }
        Value::Object(obj)
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Expands `regular_bec:l,r[,eps]` into a model object.
pub fn expand_model_shorthand(text: &str) -> Result<Value, CliError> {
    let bad = || {
        config_error(format!(
            "model: cannot parse `{text}`; expected `regular_bec:l,r[,eps]` or a JSON object"
        ))
    };
    let (kind, args) = text.split_once(':').ok_or_else(bad)?;
    if kind.trim() != "regular_bec" {
        return Err(bad());
    }
    let parts: Vec<&str> = args.split(',').map(str::trim).collect();
    if parts.len() < 2 || parts.len() > 3 {
        return Err(bad());
    }
    let mut obj = Map::new();
    obj.insert("type".into(), Value::from("regular_bec"));
    obj.insert(
        "l".into(),
        Value::from(parts[0].parse::<u32>().map_err(|_| bad())?),
    );
    obj.insert(
        "r".into(),
        Value::from(parts[1].parse::<u32>().map_err(|_| bad())?),
    );
    if let Some(eps) = parts.get(2) {
        obj.insert(
            "eps".into(),
            Value::from(eps.parse::<f64>().map_err(|_| bad())?),
        );
    }
    Ok(Value::Object(obj))
}

fn parse_strict<T: DeserializeOwned>(value: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            config_error(e.into_inner().to_string())
        } else {
            config_error(format!("key `{path}`: {}", e.into_inner()))
        }
    })
}

fn take<T: DeserializeOwned>(
    map: &mut Map<String, Value>,
    key: &str,
) -> Result<Option<T>, CliError> {
    match map.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v)
            .map(Some)
            .map_err(|e| config_error(format!("key `{key}`: {e}"))),
    }
}

fn positive(key: &str, value: f64) -> Result<(), CliError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(config_error(format!(
            "key `{key}`: must be a positive finite number, got {value}"
        )))
    }
}

fn at_least(key: &str, value: usize, min: usize) -> Result<(), CliError> {
    if value >= min {
        Ok(())
    } else {
        Err(config_error(format!(
            "key `{key}`: must be at least {min}, got {value}"
        )))
    }
}

fn check_model(model: &ModelSpec) -> Result<(), CliError> {
    model.build().map(|_| ()).map_err(|e| match e {
        gsc_core::GscError::InvalidParameter { name, reason } => {
            config_error(format!("key `model.{name}`: {reason}"))
        }
        other => config_error(format!("key `model`: {other}")),
    })
}

fn validate(params: &Params) -> Result<(), CliError> {
    match params {
        Params::FixedPoints(p) => {
            check_model(&p.model)?;
            if let Some(g) = p.grid {
                at_least("grid", g, 2)?;
            }
            at_least("profile_points", p.profile_points, 2)
        }
        Params::Threshold(p) => {
            positive("tol", p.tol)?;
            at_least("grid", p.grid, 2)?;
            at_least("profile_points", p.profile_points, 2)?;
            check_model(&ModelSpec::regular_bec(p.model.l, p.model.r, 0.5))
        }
        Params::GscRun(p) => {
            check_model(&p.model)?;
            if !(1..=gsc_core::lattice::MAX_K).contains(&p.k) {
                return Err(config_error(format!(
                    "key `k`: must be in 1..={}, got {}",
                    gsc_core::lattice::MAX_K,
                    p.k
                )));
            }
            at_least("l", p.l, 2)?;
            if !(p.stop_eps >= 0.0) {
                return Err(config_error("key `stop_eps`: must be non-negative"));
            }
            Ok(())
        }
        Params::PdeRun(p) => {
            check_model(&p.model)?;
            if !(1..=gsc_core::lattice::MAX_K).contains(&p.k) {
                return Err(config_error(format!(
                    "key `k`: must be in 1..={}, got {}",
                    gsc_core::lattice::MAX_K,
                    p.k
                )));
            }
            at_least("n", p.n, 3)?;
            positive("m", p.m)?;
            if let Some(dt) = p.dt {
                positive("dt", dt)?;
            }
            if !(p.stop_eps >= 0.0) {
                return Err(config_error("key `stop_eps`: must be non-negative"));
            }
            Ok(())
        }
        Params::Conservation(p) => {
            check_model(&p.model)?;
            at_least("n", p.n, 5)?;
            positive("m", p.m)?;
            if !(p.stop_eps >= 0.0) {
                return Err(config_error("key `stop_eps`: must be non-negative"));
            }
            Ok(())
        }
        Params::Verify(p) => p.model.as_ref().map_or(Ok(()), check_model),
    }
}

/// Builds the configuration from a JSON object (file contents merged with
/// flag overrides).
pub fn resolve(mut map: Map<String, Value>) -> Result<ExperimentConfig, CliError> {
    let command: Command =
        take(&mut map, "command")?.ok_or_else(|| config_error("key `command`: missing"))?;
    let out: PathBuf = take(&mut map, "out")?.unwrap_or_else(|| PathBuf::from("gsc-out"));
    let seed: u64 = take(&mut map, "seed")?.unwrap_or(0);
    let workers: Option<usize> = take(&mut map, "workers")?;
    if workers == Some(0) {
        return Err(config_error("key `workers`: must be at least 1"));
    }
    if let Some(Value::String(s)) = map.get("model") {
        let expanded = expand_model_shorthand(s)?;
        map.insert("model".into(), expanded);
    }
    let rest = Value::Object(map);
    let params = match command {
        Command::FixedPoints => Params::FixedPoints(parse_strict(rest)?),
        Command::Threshold => Params::Threshold(parse_strict(rest)?),
        Command::GscRun => Params::GscRun(parse_strict(rest)?),
        Command::PdeRun => Params::PdeRun(parse_strict(rest)?),
        Command::ConservationCheck => Params::Conservation(parse_strict(rest)?),
        Command::Verify => Params::Verify(parse_strict(rest)?),
    };
    validate(&params)?;
    Ok(ExperimentConfig {
        common: Common {
            command,
            out,
            seed,
            workers,
        },
        params,
    })
}

/// Parses a configuration document; it must be a JSON object.
pub fn parse_document(text: &str) -> Result<Map<String, Value>, CliError> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(config_error("configuration must be a JSON object")),
        Err(e) => Err(config_error(format!("malformed JSON: {e}"))),
    }
}
