//! Diagonal Laplace approximation of the decoder-parameter posterior.
//!
//! The posterior over the decoder mean-network parameters is approximated by
//! `N(θ_MAP, diag(σ_L²))` with precision
//! `σ_L,k⁻² = −∂²𝓛/∂θ_k² + ⟨τ_k⟩`. The curvature of the full-batch ELBO is
//! obtained by central differences of its analytic gradient with the
//! reparametrization noise frozen. The decoder log-variances and the encoder
//! stay at their MAP values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ard::ArdState;
use crate::error::{check_len, Error, Result};
use crate::vae::{decoder_log_lik_grad, draw_noise, encode, reparameterize, DecoderParams, EncoderParams};

/// Precisions below this are replaced by the prior precision.
pub const PRECISION_FLOOR: f64 = 1e-8;
pub const DEFAULT_FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplacePosterior {
    pub mu_l: Vec<f64>,
    pub sigma_l_sq: Vec<f64>,
    /// Number of precisions replaced by the floor.
    pub floored: usize,
}

impl LaplacePosterior {
    pub fn validate(&self) -> Result<()> {
        check_len("Laplace variances", self.mu_l.len(), self.sigma_l_sq.len())?;
        if self.sigma_l_sq.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("Laplace variances must be finite and non-negative"));
        }
        Ok(())
    }

    /// A decoder with mean-network parameters drawn from the posterior.
    pub fn sample_decoder<R: Rng + ?Sized>(&self, dec_map: &DecoderParams, rng: &mut R) -> Result<DecoderParams> {
        let mut dec = dec_map.clone();
        dec.mean_net.set_flat(&laplace_sample(self, rng))?;
        Ok(dec)
    }
}

/// Diagonal Laplace fit around `theta_map` for a log-posterior whose data
/// term has gradient `grad` and whose prior contributes `prior_precision`.
///
/// The difference step for coordinate `k` is `fd_step · max(|θ_k|, 1)`.
pub fn fit_diagonal<F>(theta_map: &[f64], grad: F, prior_precision: &[f64], fd_step: f64) -> Result<LaplacePosterior>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    check_len("prior precisions", theta_map.len(), prior_precision.len())?;
    if !(fd_step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let curvature: Vec<f64> = (0..theta_map.len())
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let h = fd_step * theta_map[k].abs().max(1.0);
            let mut theta = theta_map.to_vec();
            theta[k] = theta_map[k] + h;
            let up = grad(&theta)?[k];
            theta[k] = theta_map[k] - h;
            let down = grad(&theta)?[k];
            let c = (up - down) / (2.0 * h);
            if c.is_finite() {
                Ok(c)
            } else {
                Err(Error::NonFiniteCurvature { index: k })
            }
        })
        .collect::<Result<_>>()?;

    let mut floored = 0;
    let sigma_l_sq = curvature
        .iter()
        .zip(prior_precision)
        .map(|(c, &prior)| {
            let mut precision = -c + prior;
            if precision < PRECISION_FLOOR {
                floored += 1;
                precision = if prior >= PRECISION_FLOOR { prior } else { 1.0 };
            }
            1.0 / precision
        })
        .collect();
    Ok(LaplacePosterior {
        mu_l: theta_map.to_vec(),
        sigma_l_sq,
        floored,
    })
}

/// Laplace approximation over the decoder mean-network parameters at the MAP.
///
/// Latent samples `z_il = μ_φ(x_i) + σ_φ(x_i) ⊙ ε_il` use `n_mc` noise draws
/// per datum from a stream seeded with `noise_seed`, shared by every
/// gradient evaluation.
pub fn laplace_fit(
    dec_map: &DecoderParams,
    enc_map: &EncoderParams,
    data: &[Vec<f64>],
    ard: Option<&ArdState>,
    fd_step: f64,
    n_mc: usize,
    noise_seed: u64,
) -> Result<LaplacePosterior> {
    if data.is_empty() {
        return Err(Error::invalid("Laplace fit needs data"));
    }
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = draw_noise(&mut rng, data.len(), n_mc, enc_map.latent_dim());
    let latents = data
        .iter()
        .zip(&noise)
        .map(|(x, eps)| {
            let lat = encode(enc_map, x)?;
            eps.iter().map(|e| reparameterize(&lat, e)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<&[f64]> = data.iter().map(|x| x.as_slice()).collect();

    let theta_map = dec_map.mean_net.to_flat();
    let prior = match ard {
        Some(state) => {
            check_len("ARD precisions", theta_map.len(), state.expected_tau.len())?;
            state.expected_tau.clone()
        }
        None => vec![0.0; theta_map.len()],
    };
    let grad = |theta: &[f64]| -> Result<Vec<f64>> {
        let mut dec = dec_map.clone();
        dec.mean_net.set_flat(theta)?;
        Ok(decoder_log_lik_grad(&dec, &batch, &latents)?.mean_net.to_flat())
    };
    fit_diagonal(&theta_map, grad, &prior, fd_step)
}

/// `θ = μ_L + σ_L ⊙ ξ`, `ξ ~ N(0, I)`.
pub fn laplace_sample<R: Rng + ?Sized>(post: &LaplacePosterior, rng: &mut R) -> Vec<f64> {
    post.mu_l
        .iter()
        .zip(&post.sigma_l_sq)
        .map(|(m, v)| {
            let xi: f64 = rng.sample(StandardNormal);
            m + v.sqrt() * xi
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{mean, variance};

    #[test]
    fn scalar_quadratic_without_prior() {
        // 𝓛(θ) = −(θ−2)²/(2·0.25)
        let grad = |t: &[f64]| Ok(vec![-(t[0] - 2.0) / 0.25]);
        let post = fit_diagonal(&[2.0], grad, &[0.0], DEFAULT_FD_STEP).unwrap();
        assert_eq!(post.mu_l, vec![2.0]);
        assert!((post.sigma_l_sq[0] - 0.25).abs() < 1e-12);
        assert_eq!(post.floored, 0);
    }

    #[test]
    fn prior_curvature_adds() {
        let grad = |t: &[f64]| Ok(vec![-4.0 * t[0]]);
        let post = fit_diagonal(&[0.0], grad, &[4.0], DEFAULT_FD_STEP).unwrap();
        assert!((post.sigma_l_sq[0] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn prior_only_limit_and_floor() {
        let flat = |_: &[f64]| Ok(vec![0.0, 0.0]);
        let post = fit_diagonal(&[0.5, -0.5], flat, &[3.0, 3.0], DEFAULT_FD_STEP).unwrap();
        assert!((post.sigma_l_sq[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(post.floored, 0);

        // convex data term: negative precision falls back to the prior
        let convex = |t: &[f64]| Ok(vec![10.0 * t[0]]);
        let post = fit_diagonal(&[0.0], convex, &[2.0], DEFAULT_FD_STEP).unwrap();
        assert_eq!(post.floored, 1);
        assert!((post.sigma_l_sq[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_finite_curvature_names_index() {
        let bad = |t: &[f64]| Ok(vec![0.0, if t[1] > 0.0 { f64::NAN } else { 0.0 }]);
        match fit_diagonal(&[0.0, 0.0], bad, &[1.0, 1.0], DEFAULT_FD_STEP) {
            Err(Error::NonFiniteCurvature { index }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sampling_moments() {
        let post = LaplacePosterior {
            mu_l: vec![1.5, -0.5],
            sigma_l_sq: vec![0.04, 0.0],
            floored: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<Vec<f64>> = (0..100_000).map(|_| laplace_sample(&post, &mut rng)).collect();
        let first: Vec<f64> = draws.iter().map(|d| d[0]).collect();
        let n = first.len() as f64;
        let m = mean(&first);
        let v = variance(&first);
        assert!((m - 1.5).abs() < 4.0 * (0.04f64 / n).sqrt());
        // Var of the sample variance for a Gaussian is 2σ⁴/(n−1)
        assert!((v - 0.04).abs() < 4.0 * (2.0 * 0.04f64.powi(2) / (n - 1.0)).sqrt());
        assert!(draws.iter().all(|d| d[1] == -0.5));
    }
}
