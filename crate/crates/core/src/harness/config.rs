//! Experiment configuration files (TOML).
//!
//! ```toml
//! [experiment]
//! seeds = [0, 1, 2]
//! augmentations = ["random_color"]
//!
//! [schedule]
//! method = "inda"
//! epochs = 200
//! window = [0, 200]
//! ```
//!
//! `[experiment]` and `[schedule]` are required; `[env]`, `[network]`, `[ppo]`
//! and `[da]` fall back to defaults. Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize};

use crate::augment::Augmentation;
use crate::distill::DaConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::nn::{Layer, NetworkSpec};
use crate::ppo::PpoConfig;
use crate::scheduler::{Method, ScheduleConfig, TrainSetup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentBlock,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub da: DaConfig,
    pub schedule: ScheduleConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    #[serde(default = "default_name")]
    pub name: String,
    pub seeds: Vec<u64>,
    /// Methods to run; empty means `schedule.method` alone.
    #[serde(default)]
    pub methods: Vec<Method>,
    /// Kind names (`"random_color"`) or full tables (`{ kind = "random_crop", min_fraction = 0.7 }`).
    #[serde(default, deserialize_with = "augmentation_list")]
    pub augmentations: Vec<Augmentation>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Epochs between evaluations; the final epoch is always evaluated.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Observations kept for the policy-distance probe.
    #[serde(default = "default_probe")]
    pub probe_observations: usize,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_eval_episodes() -> usize {
    50
}

fn default_eval_every() -> usize {
    10
}

fn default_probe() -> usize {
    256
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AugEntry {
    Kind(String),
    Spec(Augmentation),
}

fn augmentation_list<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Augmentation>, D::Error> {
    Vec::<AugEntry>::deserialize(d)?
        .into_iter()
        .map(|e| match e {
            AugEntry::Kind(k) => Augmentation::from_kind(&k).map_err(serde::de::Error::custom),
            AugEntry::Spec(s) => Ok(s),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Trunk layers; absent means the built-in default trunk.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<Layer>>,
    pub init_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            layers: None,
            init_scale: 0.05,
        }
    }
}

impl NetworkConfig {
    pub fn spec_for(&self, env: &EnvConfig) -> NetworkSpec {
        let mut spec = NetworkSpec::default_for(env.obs_shape(), crate::env::Action::COUNT);
        if let Some(layers) = &self.layers {
            spec.layers = layers.clone();
        }
        spec
    }
}

const REQUIRED_BLOCKS: [&str; 2] = ["experiment", "schedule"];

impl ExperimentConfig {
    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let missing: Vec<&str> = REQUIRED_BLOCKS.iter().copied().filter(|b| !table.contains_key(*b)).collect();
        if !missing.is_empty() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                message: format!("missing required blocks: {}", missing.iter().map(|b| format!("[{b}]")).collect::<Vec<_>>().join(", ")),
            });
        }
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        if self.experiment.eval_episodes == 0 {
            return Err(Error::Config("experiment.eval_episodes must be >= 1".into()));
        }
        for m in self.methods() {
            self.setup(m, self.experiment.seeds[0]).validate()?;
        }
        self.network.spec_for(&self.env).param_shapes()?;
        Ok(())
    }

    pub fn methods(&self) -> Vec<Method> {
        if self.experiment.methods.is_empty() {
            vec![self.schedule.method]
        } else {
            self.experiment.methods.clone()
        }
    }

    pub fn setup(&self, method: Method, seed: u64) -> TrainSetup {
        TrainSetup {
            env: Arc::new(self.env.clone()),
            network: self.network.spec_for(&self.env),
            init_scale: self.network.init_scale,
            ppo: self.ppo.clone(),
            da: self.da.clone(),
            schedule: ScheduleConfig {
                method,
                ..self.schedule.clone()
            },
            augmentations: self.experiment.augmentations.clone(),
            seed,
        }
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::parse_str(&text, path)
}
