//! Automatic Relevance Determination prior over decoder parameters.
//!
//! Each parameter has a zero-mean Gaussian prior with its own precision `τ_k`,
//! itself Gamma(a0, b0) distributed. The precisions are treated as latent and
//! refreshed by an inner-loop EM step: the E-step evaluates `⟨τ_k⟩` at the
//! current parameters, the M-step uses the resulting Gaussian log-prior gradient.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub const DEFAULT_A0: f64 = 1e-5;
pub const DEFAULT_B0: f64 = 1e-5;

/// Magnitude below which a parameter counts as inactive.
pub const INACTIVE_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArdState {
    pub a0: f64,
    pub b0: f64,
    pub expected_tau: Vec<f64>,
}

fn check_hyper(a0: f64, b0: f64) -> Result<()> {
    if !(a0 > 0.0 && b0 > 0.0 && a0.is_finite() && b0.is_finite()) {
        return Err(Error::invalid(format!(
            "ARD hyper-parameters must be positive, got a0={a0}, b0={b0}"
        )));
    }
    Ok(())
}

/// `⟨τ_k⟩ = (a0 + ½) / (b0 + θ_k²/2)`.
pub fn ard_e_step(a0: f64, b0: f64, theta: &[f64]) -> Vec<f64> {
    theta.iter().map(|t| (a0 + 0.5) / (b0 + 0.5 * t * t)).collect()
}

/// `∂ log p(θ) / ∂θ_k = −⟨τ_k⟩ θ_k`.
pub fn ard_log_prior_grad(state: &ArdState, theta: &[f64]) -> Result<Vec<f64>> {
    check_len("ARD precisions", state.expected_tau.len(), theta.len())?;
    Ok(state.expected_tau.iter().zip(theta).map(|(tau, t)| -tau * t).collect())
}

/// Diagonal of the log-prior Hessian; off-diagonal entries are zero.
pub fn ard_hessian_diag(state: &ArdState) -> Vec<f64> {
    state.expected_tau.iter().map(|t| -t).collect()
}

pub fn sparsity_fraction(theta: &[f64], threshold: f64) -> f64 {
    if theta.is_empty() {
        return 0.0;
    }
    theta.iter().filter(|t| t.abs() < threshold).count() as f64 / theta.len() as f64
}

impl ArdState {
    pub fn new(a0: f64, b0: f64, theta: &[f64]) -> Result<Self> {
        check_hyper(a0, b0)?;
        Ok(ArdState {
            a0,
            b0,
            expected_tau: ard_e_step(a0, b0, theta),
        })
    }

    pub fn e_step(&mut self, theta: &[f64]) {
        self.expected_tau = ard_e_step(self.a0, self.b0, theta);
    }

    pub fn log_prior_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        ard_log_prior_grad(self, theta)
    }

    pub fn validate(&self) -> Result<()> {
        check_hyper(self.a0, self.b0)?;
        if self.expected_tau.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::invalid("ARD precisions must be positive and finite"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn e_step_values() {
        let tau = ard_e_step(1e-5, 1e-5, &[0.0, 1.0]);
        assert!((tau[0] - 0.500_01 / 1e-5).abs() < 1e-9);
        assert!((tau[0] - 50_001.0).abs() < 1e-9);
        assert!((tau[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prior_grad_and_hessian() {
        let state = ArdState {
            a0: 1e-5,
            b0: 1e-5,
            expected_tau: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(ard_log_prior_grad(&state, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(ard_log_prior_grad(&state, &[1.0, 0.0, 0.0]).unwrap()[0], -1.0);
        assert_eq!(ard_hessian_diag(&state)[1], -2.0);
        assert!(ard_log_prior_grad(&state, &[1.0]).is_err());

        // Hessian diagonal is the derivative of the gradient at frozen ⟨τ⟩
        let theta = [0.3, -0.2, 1.5];
        let h = 1e-6;
        let hess = ard_hessian_diag(&state);
        for k in 0..3 {
            let mut up = theta;
            up[k] += h;
            let mut down = theta;
            down[k] -= h;
            let fd = (ard_log_prior_grad(&state, &up).unwrap()[k] - ard_log_prior_grad(&state, &down).unwrap()[k])
                / (2.0 * h);
            assert!((fd - hess[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn sparsity_cases() {
        assert_eq!(sparsity_fraction(&[0.0; 10], 1e-4), 1.0);
        assert_eq!(sparsity_fraction(&[1.0, -1.0, 1.0], 1e-4), 0.0);
        assert_eq!(sparsity_fraction(&[1e-5, 1.0], 1e-4), 0.5);
    }

    #[test]
    fn invalid_hyper_parameters() {
        assert!(ArdState::new(0.0, 1e-5, &[1.0]).is_err());
        assert!(ArdState::new(1e-5, -1.0, &[1.0]).is_err());
    }

    #[test]
    fn pure_prior_ascent_shrinks_monotonically() {
        let mut theta = 0.8f64;
        let mut state = ArdState::new(DEFAULT_A0, DEFAULT_B0, &[theta]).unwrap();
        let lr = 1e-6;
        for _ in 0..200 {
            state.e_step(&[theta]);
            let g = state.log_prior_grad(&[theta]).unwrap()[0];
            let next = theta + lr * g;
            assert!(next.abs() < theta.abs());
            theta = next;
        }
        assert!(theta.abs() < 0.8);
    }

    #[test]
    fn shrinkage_exceeds_unit_gaussian_by_two_orders() {
        let theta = 1e-3;
        let state = ArdState::new(DEFAULT_A0, DEFAULT_B0, &[theta]).unwrap();
        let ard = state.log_prior_grad(&[theta]).unwrap()[0].abs();
        let unit_gaussian = theta;
        assert!(ard / unit_gaussian > 100.0);
    }

    proptest! {
        #[test]
        fn e_step_decreases_in_magnitude(a in 0.0f64..5.0, b in 0.0f64..5.0) {
            prop_assume!((a.abs() - b.abs()).abs() > 1e-9);
            let tau = ard_e_step(DEFAULT_A0, DEFAULT_B0, &[a, b]);
            prop_assert_eq!(a.abs() < b.abs(), tau[0] > tau[1]);
        }

        #[test]
        fn prior_grad_opposes_sign(theta in prop::collection::vec(-3.0f64..3.0, 1..20)) {
            let state = ArdState::new(DEFAULT_A0, DEFAULT_B0, &theta).unwrap();
            let g = state.log_prior_grad(&theta).unwrap();
            for (gk, tk) in g.iter().zip(&theta) {
                prop_assert!(gk * tk <= 0.0);
                prop_assert!(state.expected_tau.iter().all(|t| *t > 0.0));
            }
        }
    }
}
