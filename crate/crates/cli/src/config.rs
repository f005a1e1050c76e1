use std::fmt;
use std::fs;
use std::path::Path;

use infodpcca::data::{HenonParams, SplitSpec, FORMAT_VERSION};
use infodpcca::models::{ModelSpec, TrainConfig};
use infodpcca::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Core(Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Core(e) => match e {
                Error::InvalidParams(_) | Error::InvalidSpec(_) | Error::InvalidSplit(_) | Error::InvalidK(_) => 2,
                Error::NonFiniteLoss { .. }
                | Error::DegenerateVariance(_)
                | Error::SingleCluster
                | Error::DivergentOrbit { .. } => 4,
                Error::StageMismatch(_) => 5,
                Error::MissingGroundTruth(_) => 6,
                _ => 3,
            },
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration: {m}"),
            Failure::Core(e) => e.fmt(f),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(Error::Json(e))
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

/// Parses a config file; unknown keys and malformed values are config errors.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let raw = fs::read(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&raw).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// Writes `config.json` (the effective configuration) into `dir`.
pub fn echo<T: Serialize>(dir: &Path, command: &str, body: &T) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let mut v = serde_json::to_value(body)?;
    if let Some(m) = v.as_object_mut() {
        m.insert("format_version".into(), FORMAT_VERSION.into());
        m.insert("command".into(), command.into());
    }
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&v)?)?;
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HenonRun {
    pub henon: HenonParams,
    pub split: Option<SplitSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupedRun {
    pub seed: u64,
    pub a1: f64,
    pub a2: f64,
    pub b: f64,
    pub n_per_group: usize,
    pub t_len: usize,
    pub dx: usize,
    pub dy: usize,
    pub noise_std: f64,
}

impl Default for GroupedRun {
    fn default() -> Self {
        Self { seed: 0, a1: 1.4, a2: 1.2, b: 0.3, n_per_group: 40, t_len: 100, dx: 30, dy: 30, noise_std: 0.05 }
    }
}

impl GroupedRun {
    pub fn params(&self, a: f64) -> HenonParams {
        HenonParams {
            a,
            b: self.b,
            t_len: self.t_len,
            dx: self.dx,
            dy: self.dy,
            noise_std: self.noise_std,
            ..HenonParams::default()
        }
    }
}

/// Train file: `model` overlays [`ModelSpec`] defaults, `train` overlays
/// [`TrainConfig`] defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub model: Option<serde_json::Value>,
    pub train: TrainConfig,
}

impl TrainFile {
    pub fn model_spec(&self) -> CliResult<ModelSpec> {
        match &self.model {
            None => Ok(ModelSpec::default()),
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Failure::Config(format!("model section: {e}"))),
        }
    }
}
