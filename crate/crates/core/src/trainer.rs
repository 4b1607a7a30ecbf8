//! Stochastic variational inference with ADAM, minibatching and warm starts.
//!
//! Draw order of the single training RNG stream, per epoch: one Fisher–Yates
//! shuffle of the data indices, then for each minibatch the reparametrization
//! noise in datum-major, sample-major, coordinate order. Remainder indices
//! beyond the last full minibatch are skipped for that epoch.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ard::{sparsity_fraction, ArdState, DEFAULT_A0, DEFAULT_B0, INACTIVE_THRESHOLD};
use crate::error::{check_len, Error, Result};
use crate::vae::{draw_noise, elbo_with_noise, DecoderParams, EncoderParams};

pub const DEFAULT_MINIBATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One ascent step on a maximized objective with gradient `grad`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len("ADAM parameters", self.m.len(), params.len())?;
        check_len("ADAM gradient", self.m.len(), grad.len())?;
        let AdamConfig {
            alpha,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p += alpha * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

pub fn adam_update(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    state.update(params, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `None` selects 64, or the dataset size when smaller.
    pub minibatch_size: Option<usize>,
    pub mc_samples: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub ard: bool,
    pub a0: f64,
    pub b0: f64,
    pub convergence_window: usize,
    pub convergence_tol: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            minibatch_size: None,
            mc_samples: 1,
            max_epochs: 2000,
            seed: 0,
            ard: true,
            a0: DEFAULT_A0,
            b0: DEFAULT_B0,
            convergence_window: 50,
            convergence_tol: 1e-4,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn effective_minibatch(&self, n: usize) -> usize {
        match self.minibatch_size {
            Some(m) => m,
            None => DEFAULT_MINIBATCH.min(n),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let m = self.effective_minibatch(n);
        if m == 0 || m > n {
            return Err(Error::invalid(format!("minibatch size {m} must be in 1..={n}")));
        }
        if self.mc_samples == 0 {
            return Err(Error::invalid("mc_samples must be at least 1"));
        }
        if self.convergence_window == 0 || !(self.convergence_tol > 0.0) {
            return Err(Error::invalid("convergence window and tolerance must be positive"));
        }
        if !(1e-8..=1e-4).contains(&self.a0) || !(1e-8..=1e-4).contains(&self.b0) {
            return Err(Error::invalid(format!(
                "ARD hyper-parameters must lie in [1e-8, 1e-4], got a0={}, b0={}",
                self.a0, self.b0
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub elbo: f64,
    pub kl: f64,
    pub recon: f64,
    pub sparsity: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub ard: Option<ArdState>,
    pub sparsity: f64,
    pub converged: bool,
    pub wall_clock_secs: f64,
    pub optimizer: AdamState,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn elbo_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.elbo).collect()
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    pub fn final_elbo(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.elbo)
    }

    /// Mean ELBO over the last convergence window, a less noisy summary of
    /// the plateau than the final epoch alone.
    pub fn converged_elbo(&self) -> Option<f64> {
        let n = self.epochs.len();
        if n == 0 {
            return None;
        }
        let tail = &self.epochs[n.saturating_sub(self.config.convergence_window)..];
        Some(tail.iter().map(|e| e.elbo).sum::<f64>() / tail.len() as f64)
    }
}

/// Relative change between the means of the last two `window`-epoch blocks
/// of the trace falls below `tol`.
pub fn has_converged(trace: &[f64], window: usize, tol: f64) -> bool {
    if window == 0 || trace.len() < 2 * window {
        return false;
    }
    let n = trace.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let recent = mean(&trace[n - window..]);
    let previous = mean(&trace[n - 2 * window..n - window]);
    ((recent - previous) / previous.abs().max(f64::MIN_POSITIVE)).abs() < tol
}

/// First epoch (1-based) whose ELBO is within `rel_tol` of `target` or above it.
pub fn epochs_to_reach(trace: &[f64], target: f64, rel_tol: f64) -> Option<usize> {
    let threshold = target - rel_tol * target.abs();
    trace.iter().position(|&e| e >= threshold).map(|i| i + 1)
}

/// Tab-separated `epoch elbo kl recon sparsity` lines with a `#` header.
pub fn format_training_log(epochs: &[EpochStats]) -> String {
    let mut out = String::from("# epoch\telbo\tkl\trecon\tsparsity\n");
    for e in epochs {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", e.epoch, e.elbo, e.kl, e.recon, e.sparsity);
    }
    out
}

struct Session {
    encoder: EncoderParams,
    decoder: DecoderParams,
    ard: Option<ArdState>,
    optimizer: Option<AdamState>,
    history: Vec<f64>,
}

pub fn train(
    data: &[Vec<f64>],
    encoder: EncoderParams,
    decoder: DecoderParams,
    config: &TrainConfig,
) -> Result<TrainReport> {
    run(
        data,
        Session {
            encoder,
            decoder,
            ard: None,
            optimizer: None,
            history: Vec::new(),
        },
        config,
    )
}

/// Continues training from a previous MAP estimate on the data augmented by
/// `new_data`, keeping the optimizer moments and ARD precisions.
///
/// When no new data arrives the objective is unchanged, so the previous ELBO
/// trace counts towards the convergence window.
pub fn warm_start_retrain(
    report: &TrainReport,
    old_data: &[Vec<f64>],
    new_data: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<TrainReport> {
    let n_f = report.decoder.data_dim();
    for x in new_data {
        check_len("new configuration vs trained model", n_f, x.len())?;
    }
    let mut data = old_data.to_vec();
    data.extend_from_slice(new_data);
    let history = if new_data.is_empty() {
        report.elbo_trace()
    } else {
        Vec::new()
    };
    run(
        &data,
        Session {
            encoder: report.encoder.clone(),
            decoder: report.decoder.clone(),
            ard: report.ard.clone(),
            optimizer: Some(report.optimizer.clone()),
            history,
        },
        config,
    )
}

fn run(data: &[Vec<f64>], session: Session, config: &TrainConfig) -> Result<TrainReport> {
    let start = Instant::now();
    let n = data.len();
    if n == 0 {
        return Err(Error::invalid("training dataset is empty"));
    }
    config.validate(n)?;
    let Session {
        mut encoder,
        mut decoder,
        ard,
        optimizer,
        mut history,
    } = session;
    encoder.validate()?;
    decoder.validate()?;
    check_len("encoder input vs data", encoder.data_dim(), data[0].len())?;
    check_len("decoder output vs data", decoder.data_dim(), data[0].len())?;
    for x in data {
        check_len("configuration length", decoder.data_dim(), x.len())?;
    }

    let m = config.effective_minibatch(n);
    let latent_dim = encoder.latent_dim();
    let enc_len = encoder.num_params();
    let theta_range = enc_len..enc_len + decoder.mean_net.num_params();

    let mut params = Vec::with_capacity(enc_len + decoder.num_params());
    encoder.append_flat(&mut params);
    decoder.append_flat(&mut params);
    let mut optimizer = match optimizer {
        Some(state) if state.m.len() == params.len() => AdamState {
            config: config.adam,
            ..state
        },
        Some(_) => return Err(Error::invalid("optimizer state does not match model size")),
        None => AdamState::new(params.len(), config.adam),
    };
    let mut ard = if config.ard {
        let theta = &params[theta_range.clone()];
        match ard {
            Some(mut state) if state.expected_tau.len() == theta.len() => {
                state.a0 = config.a0;
                state.b0 = config.b0;
                state.e_step(theta);
                Some(state)
            }
            _ => Some(ArdState::new(config.a0, config.b0, theta)?),
        }
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; params.len()];
    let mut epochs = Vec::new();
    let mut converged =
        has_converged(&history, config.convergence_window, config.convergence_tol) && !history.is_empty();

    for epoch in 1..=config.max_epochs {
        if converged {
            break;
        }
        order.shuffle(&mut rng);
        let (mut elbo, mut kl, mut recon) = (0.0, 0.0, 0.0);
        let n_batches = n / m;
        for chunk in order.chunks_exact(m) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
            let noise = draw_noise(&mut rng, m, config.mc_samples, latent_dim);
            let (value, grads) = elbo_with_noise(&encoder, &decoder, &batch, n, &noise).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
            elbo += value.total;
            kl += value.kl_term;
            recon += value.recon_term;

            grad.clear();
            grads.encoder.append_flat(&mut grad);
            grads.decoder.append_flat(&mut grad);
            if let Some(state) = ard.as_mut() {
                let theta = &params[theta_range.clone()];
                state.e_step(theta);
                for ((g, tau), t) in grad[theta_range.clone()].iter_mut().zip(&state.expected_tau).zip(theta) {
                    *g -= tau * t;
                }
            }
            optimizer.update(&mut params, &grad)?;
            encoder.set_flat(&params[..enc_len])?;
            decoder.set_flat(&params[enc_len..])?;
        }
        let nb = n_batches as f64;
        let stats = EpochStats {
            epoch,
            elbo: elbo / nb,
            kl: kl / nb,
            recon: recon / nb,
            sparsity: sparsity_fraction(&params[theta_range.clone()], INACTIVE_THRESHOLD),
        };
        if !stats.elbo.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: ELBO {}", stats.elbo)));
        }
        epochs.push(stats);
        history.push(stats.elbo);
        converged = has_converged(&history, config.convergence_window, config.convergence_tol);
    }

    if let Some(state) = ard.as_mut() {
        state.e_step(&params[theta_range.clone()]);
    }
    Ok(TrainReport {
        sparsity: sparsity_fraction(&params[theta_range], INACTIVE_THRESHOLD),
        epochs,
        encoder,
        decoder,
        ard,
        converged,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        optimizer,
        config: config.clone(),
    })
}
