//! Config-driven experiment runs that write plot-ready CSV/JSON artifacts.

mod artifacts;
mod commands;

pub use commands::{cmd_etc, cmd_gradcheck, cmd_nss, cmd_pendulum, EtcMetrics, GradcheckOutcome, NssRunReport};

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::etc::{EtcError, EtcPlant, SimGrid};
use crate::gradkit::{AdamConfig, GradError};
use crate::nss::{ModelConfig, NssError, Objective, TrainConfig};
use crate::pendulum::{PendulumConfig, PendulumError, RegressionConfig};
use crate::smr::SmrConfig;
use crate::ssm::checkpoint::CheckpointError;
use crate::ssm::ParamForm;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Etc(#[from] EtcError),
    #[error(transparent)]
    Nss(#[from] NssError),
    #[error(transparent)]
    Pendulum(#[from] PendulumError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradcheckFailed(Vec<String>),
}

impl RunError {
    /// `2` for usage and configuration problems, `1` otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Etc(EtcError::Plant(_) | EtcError::Grid(_) | EtcError::NotCertified { .. }) => 2,
            RunError::Nss(NssError::Config(_)) | RunError::Pendulum(PendulumError::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Settings shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct GlobalOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub threads: usize,
    /// TOML `key = value` lines applied after the config file.
    pub overrides: Vec<String>,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses TOML layers over the defaults of `T`, later layers winning. Keys
/// missing at any depth keep the run's default value; unknown keys are rejected.
pub fn parse_config<T: DeserializeOwned + Serialize + Default>(layers: &[&str]) -> Result<T, RunError> {
    let mut base = toml::Table::try_from(T::default()).map_err(|e| RunError::Config(e.to_string()))?;
    for text in layers {
        let over: toml::Table = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        merge(&mut base, over);
    }
    base.try_into().map_err(|e: toml::de::Error| RunError::Config(e.to_string()))
}

/// Reads the config file (defaults when `None`) and applies `overrides`,
/// each a TOML `key = value` line such as `train.epochs = 10`.
pub fn load_config<T: DeserializeOwned + Serialize + Default>(path: Option<&Path>, overrides: &[String]) -> Result<T, RunError> {
    let file = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| RunError::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut layers = vec![file.as_str()];
    layers.extend(overrides.iter().map(String::as_str));
    parse_config(&layers).map_err(|e| match path {
        Some(p) => RunError::Config(format!("{}: {e}", p.display())),
        None => e,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantChoice {
    #[default]
    Corrected,
    Printed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EtcConfig {
    pub plant: PlantChoice,
    pub kappa: f64,
    pub x0: Vec<f64>,
    pub grid: SimGrid,
    /// Sampling jitter width; the grid width when absent.
    pub delta_max: Option<f64>,
    /// Simulate even if the Lyapunov identity does not hold.
    pub allow_uncertified: bool,
    /// Extra jitter seeds summarised in the metrics.
    pub sweep_seeds: u64,
    pub seed: u64,
}

impl Default for EtcConfig {
    fn default() -> Self {
        Self {
            plant: PlantChoice::Corrected,
            kappa: 0.05,
            x0: vec![1.0, 0.0],
            grid: SimGrid::default(),
            delta_max: None,
            allow_uncertified: false,
            sweep_seeds: 20,
            seed: 0,
        }
    }
}

impl EtcConfig {
    pub fn plant(&self) -> Result<EtcPlant, RunError> {
        let base = match self.plant {
            PlantChoice::Corrected => EtcPlant::corrected(),
            PlantChoice::Printed => EtcPlant::printed(),
        };
        Ok(base.with_kappa(self.kappa)?)
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_vec(self.x0.clone())
    }

    pub fn delta_max(&self) -> f64 {
        self.delta_max.unwrap_or(self.grid.dt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SineSettings {
    pub points: usize,
    /// Angular frequency of `sin(ω t)` on `[0, 1)`.
    pub omega: f64,
    pub delta_max: f64,
}

impl Default for SineSettings {
    fn default() -> Self {
        Self {
            points: 100,
            omega: 5.0 * std::f64::consts::PI,
            delta_max: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NssConfig {
    pub task: SineSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Initialization seed; the jitter seed is `seed + 1000`.
    pub seed: u64,
}

impl NssConfig {
    /// Pinned single-layer sine setup, gate off.
    pub fn sine(smr: bool) -> Self {
        Self {
            task: SineSettings::default(),
            model: ModelConfig {
                layers: 1,
                state_size: 16,
                channels: 4,
                form: ParamForm::Diagonal,
                smr: smr.then(SmrConfig::default),
                dt_min: 0.01,
                dt_max: 0.01,
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 2000,
                optimizer: AdamConfig {
                    lr: 1e-3,
                    ..Default::default()
                },
                objective: Objective::NextStep,
                batch_size: 0,
                seed: 0,
            },
            seed: 0,
        }
    }

    pub fn perturb_seed(&self) -> u64 {
        self.seed.wrapping_add(1000)
    }
}

impl Default for NssConfig {
    fn default() -> Self {
        Self::sine(false)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumRunConfig {
    pub data: PendulumConfig,
    pub regression: RegressionConfig,
    /// Write the dataset and stop.
    pub generate_only: bool,
    /// Load this dataset instead of generating one.
    pub dataset: Option<PathBuf>,
    /// Export the frames of these training samples as PGM images.
    pub export_frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub instances: usize,
    /// Primitive whose backward rule is deliberately broken.
    pub corrupt: Option<String>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 3,
            corrupt: None,
            seed: 0,
        }
    }
}

/// Applies a `--seed` override to every seed a config carries.
pub trait Seeded {
    fn set_seed(&mut self, seed: u64);
}

impl Seeded for EtcConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

impl Seeded for NssConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }
}

impl Seeded for PendulumRunConfig {
    fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.regression.seed = seed;
        self.regression.train.seed = seed;
    }
}

impl Seeded for GradcheckConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

/// Loads a config, applies the seed override and echoes the result as
/// `config.toml` in the output directory.
pub fn resolve_config<T>(opts: &GlobalOptions) -> Result<T, RunError>
where
    T: DeserializeOwned + Serialize + Default + Seeded,
{
    let mut cfg: T = load_config(opts.config.as_deref(), &opts.overrides)?;
    if let Some(seed) = opts.seed {
        cfg.set_seed(seed);
    }
    fs::create_dir_all(&opts.out).map_err(io_err(&opts.out))?;
    let text = toml::to_string(&cfg).map_err(|e| RunError::Config(format!("cannot serialize config: {e}")))?;
    let path = opts.out.join("config.toml");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(cfg)
}
