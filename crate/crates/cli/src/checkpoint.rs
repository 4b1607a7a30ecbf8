//! Versioned JSON model checkpoint.
//!
//! Floats are written in shortest round-trip form, so save → load → save
//! reproduces the document byte for byte.

use std::path::Path;

use cvdisc::ard::ArdState;
use cvdisc::data::write_atomic;
use cvdisc::laplace::LaplacePosterior;
use cvdisc::vae::{Architecture, DecoderParams, EncoderParams};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub final_elbo: f64,
    pub converged: bool,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub ard: Option<ArdState>,
    pub laplace: Option<LaplacePosterior>,
    pub config: RunConfig,
    pub seed: u64,
    pub atom_labels: Vec<String>,
    pub masses: Vec<f64>,
    /// Centered alignment reference, when training data were aligned.
    pub alignment_reference: Option<Vec<f64>>,
    /// Training frame drawn uniformly at train time; default chain start.
    pub chain_start: Vec<f64>,
    pub summary: TrainingSummary,
}

impl ModelCheckpoint {
    pub fn validate(&self) -> cvdisc::Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        let arch = &self.architecture;
        let head = vec![arch.encoder_head_spec()];
        if self.encoder.trunk.specs() != arch.encoder_trunk_specs()
            || self.encoder.head_mu.specs() != head
            || self.encoder.head_logvar.specs() != head
            || self.decoder.mean_net.specs() != arch.decoder_specs()
        {
            return Err(cvdisc::Error::invalid(
                "checkpoint layers do not match its architecture",
            ));
        }
        if self.encoder.latent_dim() != arch.latent_dim || self.decoder.data_dim() != arch.data_dim {
            return Err(cvdisc::Error::invalid(
                "checkpoint dimensions do not match its architecture",
            ));
        }
        if self.masses.len() * 3 != arch.data_dim || self.atom_labels.len() != self.masses.len() {
            return Err(cvdisc::Error::invalid(
                "checkpoint atom metadata does not match data dimension",
            ));
        }
        if self.chain_start.len() != arch.data_dim {
            return Err(cvdisc::Error::invalid("checkpoint chain start has the wrong length"));
        }
        if let Some(state) = &self.ard {
            state.validate()?;
        }
        if let Some(post) = &self.laplace {
            post.validate()?;
            if post.mu_l.len() != self.decoder.mean_net.num_params() {
                return Err(cvdisc::Error::invalid("Laplace posterior does not match the decoder"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> CliResult<Self> {
        let ckpt: ModelCheckpoint = serde_json::from_str(text).map_err(|e| CliError::Malformed {
            path: path.to_path_buf(),
            message: format!("not a model checkpoint: {e}"),
        })?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(CliError::Malformed {
                path: path.to_path_buf(),
                message: format!(
                    "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                    ckpt.format_version
                ),
            });
        }
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cvdisc::Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        Ok(write_atomic(path, &self.to_json())?)
    }
}
