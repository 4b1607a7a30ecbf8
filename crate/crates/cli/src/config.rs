//! Run configuration: every tunable default in one TOML document.

use std::path::Path;

use cvdisc::laplace::DEFAULT_FD_STEP;
use cvdisc::observables::BandConfig;
use cvdisc::sampler::ChainConfig;
use cvdisc::trainer::TrainConfig;
use cvdisc::vae::Architecture;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: Architecture::DEFAULT_LATENT_DIM,
            hidden: Architecture::DEFAULT_HIDDEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaplaceConfig {
    pub fd_step: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        LaplaceConfig {
            fd_step: DEFAULT_FD_STEP,
            mc_samples: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Remove rigid-body motion against the first training frame.
    pub align: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: ChainConfig,
    pub laplace: LaplaceConfig,
    pub band: BandConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            align: true,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: ChainConfig::default(),
            laplace: LaplaceConfig::default(),
            band: BandConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| cvdisc::Error::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
