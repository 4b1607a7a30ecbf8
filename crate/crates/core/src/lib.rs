//! Collective-variable discovery with a deep Bayesian latent-variable model.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ard;
pub mod data;
pub mod error;
pub mod laplace;
pub mod linear_gaussian;
pub mod nn;
pub mod observables;
pub mod sampler;
pub mod stats;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
