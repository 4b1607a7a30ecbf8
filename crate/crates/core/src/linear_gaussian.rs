//! Linear-Gaussian latent model `x = W z + b + ν`, `z ~ N(0, I)`, `ν ~ N(0, diag(d))`.
//!
//! Its marginal and latent posterior are available in closed form, which makes
//! it the reference model for checking the estimators and the sampler. It can
//! be expressed exactly as a decoder with a single linear layer, and, when the
//! latent posterior covariance is diagonal, as an encoder that reproduces the
//! exact posterior.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, Dense, LayerSpec, MlpParams};
use crate::vae::{DecoderParams, EncoderParams, GaussianLatent};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian {
    /// `data_dim × latent_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise_var: Vec<f64>,
    pub latent_dim: usize,
}

impl LinearGaussian {
    pub fn new(weight: Vec<f64>, bias: Vec<f64>, noise_var: Vec<f64>, latent_dim: usize) -> Result<Self> {
        let n_f = bias.len();
        check_len("linear-Gaussian weight", n_f * latent_dim, weight.len())?;
        check_len("linear-Gaussian noise", n_f, noise_var.len())?;
        if noise_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("noise variances must be positive"));
        }
        Ok(LinearGaussian {
            weight,
            bias,
            noise_var,
            latent_dim,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.bias.len()
    }

    fn w(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.data_dim(), self.latent_dim, &self.weight)
    }

    pub fn decoder(&self) -> DecoderParams {
        let spec = LayerSpec::new(self.latent_dim, self.data_dim(), Activation::Identity);
        DecoderParams {
            mean_net: MlpParams {
                layers: vec![Dense {
                    spec,
                    weight: self.weight.clone(),
                    bias: self.bias.clone(),
                }],
            },
            log_sigma_sq: self.noise_var.iter().map(|v| v.ln()).collect(),
        }
    }

    /// Posterior covariance `(I + Wᵀ D⁻¹ W)⁻¹`, independent of `x`.
    pub fn posterior_cov(&self) -> DMatrix<f64> {
        let w = self.w();
        let d_inv = DMatrix::from_diagonal(&DVector::from_iterator(
            self.data_dim(),
            self.noise_var.iter().map(|v| 1.0 / v),
        ));
        let precision = DMatrix::identity(self.latent_dim, self.latent_dim) + w.transpose() * &d_inv * &w;
        precision
            .try_inverse()
            .expect("posterior precision is positive definite")
    }

    /// Matrix `A` with posterior mean `A (x − b)`.
    fn posterior_gain(&self) -> DMatrix<f64> {
        let w = self.w();
        let d_inv = DMatrix::from_diagonal(&DVector::from_iterator(
            self.data_dim(),
            self.noise_var.iter().map(|v| 1.0 / v),
        ));
        self.posterior_cov() * w.transpose() * d_inv
    }

    pub fn posterior_mean(&self, x: &[f64]) -> Vec<f64> {
        let centered = DVector::from_iterator(self.data_dim(), x.iter().zip(&self.bias).map(|(a, b)| a - b));
        (self.posterior_gain() * centered).iter().copied().collect()
    }

    pub fn marginal_mean(&self) -> Vec<f64> {
        self.bias.clone()
    }

    /// `W Wᵀ + diag(d)`.
    pub fn marginal_cov(&self) -> DMatrix<f64> {
        let w = self.w();
        let mut cov = &w * w.transpose();
        for (j, v) in self.noise_var.iter().enumerate() {
            cov[(j, j)] += v;
        }
        cov
    }

    pub fn log_marginal(&self, x: &[f64]) -> f64 {
        let cov = self.marginal_cov();
        let n = self.data_dim();
        let chol = cov.cholesky().expect("marginal covariance is positive definite");
        let r = DVector::from_iterator(n, x.iter().zip(&self.bias).map(|(a, b)| a - b));
        let sol = chol.solve(&r);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + r.dot(&sol))
    }

    /// Exact latent posterior as a diagonal Gaussian, when it is diagonal.
    pub fn posterior(&self, x: &[f64]) -> Result<GaussianLatent> {
        let cov = self.diagonal_posterior_cov()?;
        Ok(GaussianLatent {
            mu: self.posterior_mean(x),
            log_var: cov.iter().map(|v| v.ln()).collect(),
        })
    }

    fn diagonal_posterior_cov(&self) -> Result<Vec<f64>> {
        let cov = self.posterior_cov();
        for i in 0..self.latent_dim {
            for j in 0..self.latent_dim {
                if i != j && cov[(i, j)].abs() > 1e-12 * (cov[(i, i)] * cov[(j, j)]).sqrt() {
                    return Err(Error::invalid(
                        "latent posterior is not diagonal; no diagonal encoder is exact",
                    ));
                }
            }
        }
        Ok((0..self.latent_dim).map(|i| cov[(i, i)]).collect())
    }

    /// Encoder whose `q_φ(z|x)` equals the exact posterior, with an identity
    /// trunk and linear heads. `mean_shift` is added to the mean head bias.
    pub fn exact_encoder(&self, mean_shift: f64) -> Result<EncoderParams> {
        let n = self.data_dim();
        let d = self.latent_dim;
        let var = self.diagonal_posterior_cov()?;
        let gain = self.posterior_gain();
        let mut trunk = Dense::zeros(LayerSpec::new(n, n, Activation::Identity));
        for i in 0..n {
            trunk.weight[i * n + i] = 1.0;
        }
        let mut head_mu = Dense::zeros(LayerSpec::new(n, d, Activation::Identity));
        for r in 0..d {
            for c in 0..n {
                head_mu.weight[r * n + c] = gain[(r, c)];
            }
            let gb: f64 = (0..n).map(|c| gain[(r, c)] * self.bias[c]).sum();
            head_mu.bias[r] = -gb + mean_shift;
        }
        let mut head_logvar = Dense::zeros(LayerSpec::new(n, d, Activation::Identity));
        head_logvar.bias = var.iter().map(|v| v.ln()).collect();
        Ok(EncoderParams {
            trunk: MlpParams { layers: vec![trunk] },
            head_mu: MlpParams { layers: vec![head_mu] },
            head_logvar: MlpParams {
                layers: vec![head_logvar],
            },
        })
    }
}
