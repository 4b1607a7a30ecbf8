//! Predictive sampling from a trained model.
//!
//! Ancestral sampling pushes `z ~ N(0, I)` through the decoder. The
//! Metropolis-within-Gibbs chain instead proposes `z̃ ~ q_φ(z | x̄_{t−1})` and
//! accepts it with the ratio of importance ratios
//!
//! ```text
//! ρ = [p_θ(x̄|z̃) p(z̃) / p_θ(x̄|z) p(z)] · [q_φ(z|x̄) / q_φ(z̃|x̄)]
//! ```
//!
//! which corrects for `q_φ` only approximating the latent posterior. Per step
//! the chain draws, in order: the proposal noise, one uniform, then the
//! decoder noise for `x̄_t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::vae::{
    diag_gaussian_log_pdf, encode, latent_log_density, reparameterize, standard_normal_log_pdf, DecoderParams,
    EncoderParams,
};

pub const DEFAULT_STEPS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            steps: DEFAULT_STEPS,
            burn_in: 0,
            thin: 1,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps <= self.burn_in {
            return Err(Error::invalid(format!(
                "chain length {} must exceed burn-in {}",
                self.steps, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thinning interval must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainOutput {
    pub samples: Vec<Vec<f64>>,
    pub accepted: usize,
    pub proposed: usize,
    pub acceptance_rate: f64,
    pub seed: Option<u64>,
    pub final_state: ChainState,
}

pub fn ancestral_sample<R: Rng + ?Sized>(dec: &DecoderParams, rng: &mut R, count: usize) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let d = dec.latent_dim();
    (0..count)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            dec.sample(&z, rng)
        })
        .collect()
}

fn log_ratio_parts(
    enc: &EncoderParams,
    dec: &DecoderParams,
    x_prev: &[f64],
    mean_prev: &[f64],
    z_prev: &[f64],
    mean_prop: &[f64],
    z_prop: &[f64],
) -> Result<f64> {
    let q = encode(enc, x_prev)?;
    let target = diag_gaussian_log_pdf(x_prev, mean_prop, &dec.log_sigma_sq) + standard_normal_log_pdf(z_prop)
        - diag_gaussian_log_pdf(x_prev, mean_prev, &dec.log_sigma_sq)
        - standard_normal_log_pdf(z_prev);
    let proposal = latent_log_density(&q, z_prop)? - latent_log_density(&q, z_prev)?;
    Ok(target - proposal)
}

/// `log ρ` for moving from `z_prev` to `z_prop` at the current configuration.
pub fn mwg_log_ratio(
    enc: &EncoderParams,
    dec: &DecoderParams,
    x_prev: &[f64],
    z_prev: &[f64],
    z_prop: &[f64],
) -> Result<f64> {
    check_len("configuration", dec.data_dim(), x_prev.len())?;
    check_len("latent state", dec.latent_dim(), z_prev.len())?;
    check_len("latent proposal", dec.latent_dim(), z_prop.len())?;
    let mean_prev = dec.mean(z_prev)?;
    let mean_prop = dec.mean(z_prop)?;
    log_ratio_parts(enc, dec, x_prev, &mean_prev, z_prev, &mean_prop, z_prop)
}

pub fn mwg_ratio(
    enc: &EncoderParams,
    dec: &DecoderParams,
    x_prev: &[f64],
    z_prev: &[f64],
    z_prop: &[f64],
) -> Result<f64> {
    Ok(mwg_log_ratio(enc, dec, x_prev, z_prev, z_prop)?.exp())
}

/// Picks `x̄₀` uniformly from `data`.
pub fn initial_configuration<R: Rng + ?Sized>(data: &[Vec<f64>], rng: &mut R) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("cannot initialize a chain from an empty dataset"));
    }
    Ok(data[rng.gen_range(0..data.len())].clone())
}

/// Runs the chain from `x0` with `z₀ = μ_φ(x0)`. Sample `t` (1-based) is kept
/// when `t > burn_in` and `(t − burn_in − 1)` is a multiple of `thin`.
pub fn mwg_run<R: Rng + ?Sized>(
    enc: &EncoderParams,
    dec: &DecoderParams,
    x0: &[f64],
    config: &ChainConfig,
    rng: &mut R,
) -> Result<ChainOutput> {
    config.validate()?;
    check_len("initial configuration", dec.data_dim(), x0.len())?;
    check_len("encoder/decoder latent dim", enc.latent_dim(), dec.latent_dim())?;
    let latent_dim = dec.latent_dim();
    let mut x = x0.to_vec();
    let mut z = encode(enc, &x)?.mu;
    let mut mean = dec.mean(&z)?;
    let mut accepted = 0;
    let kept = (config.steps - config.burn_in).div_ceil(config.thin);
    let mut samples = Vec::with_capacity(kept);

    for t in 1..=config.steps {
        let q = encode(enc, &x)?;
        let eps: Vec<f64> = (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let z_prop = reparameterize(&q, &eps)?;
        let mean_prop = dec.mean(&z_prop)?;
        let target = diag_gaussian_log_pdf(&x, &mean_prop, &dec.log_sigma_sq) + standard_normal_log_pdf(&z_prop)
            - diag_gaussian_log_pdf(&x, &mean, &dec.log_sigma_sq)
            - standard_normal_log_pdf(&z);
        let log_rho = target - latent_log_density(&q, &z_prop)? + latent_log_density(&q, &z)?;
        let u: f64 = rng.gen();
        if log_rho >= 0.0 || u < log_rho.exp() {
            z = z_prop;
            mean = mean_prop;
            accepted += 1;
        }
        x = mean.clone();
        for (xj, ls) in x.iter_mut().zip(&dec.log_sigma_sq) {
            let e: f64 = rng.sample(StandardNormal);
            *xj += (0.5 * ls).exp() * e;
        }
        if t > config.burn_in && (t - config.burn_in - 1).is_multiple_of(config.thin) {
            samples.push(x.clone());
        }
    }

    Ok(ChainOutput {
        samples,
        accepted,
        proposed: config.steps,
        acceptance_rate: accepted as f64 / config.steps as f64,
        seed: None,
        final_state: ChainState {
            z,
            x,
            step: config.steps,
        },
    })
}

/// [`mwg_run`] with a dedicated ChaCha stream seeded by `seed`.
pub fn mwg_run_seeded(
    enc: &EncoderParams,
    dec: &DecoderParams,
    x0: &[f64],
    config: &ChainConfig,
    seed: u64,
) -> Result<ChainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = mwg_run(enc, dec, x0, config, &mut rng)?;
    out.seed = Some(seed);
    Ok(out)
}

/// The uncorrected chain: every proposal from `q_φ` is accepted.
pub fn q_pushforward_run<R: Rng + ?Sized>(
    enc: &EncoderParams,
    dec: &DecoderParams,
    x0: &[f64],
    steps: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    check_len("initial configuration", dec.data_dim(), x0.len())?;
    let latent_dim = dec.latent_dim();
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let q = encode(enc, &x)?;
        let eps: Vec<f64> = (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let z = reparameterize(&q, &eps)?;
        x = dec.sample(&z, rng)?;
        out.push(x.clone());
    }
    Ok(out)
}
