//! Encoder `q_φ(z|x)`, decoder `p_θ(x|z)` and the reparametrized ELBO estimator.
//!
//! The encoder is a shared trunk followed by two heads producing the mean and
//! the log-variance of a diagonal Gaussian over the latent CVs. The decoder is
//! a network for the mean of a diagonal Gaussian over configurations whose
//! log-variances are free parameters independent of `z`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, LayerSpec, MlpParams, Tape};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Layer widths and activations of the encoder/decoder pair.
///
/// The encoder trunk maps `data_dim → h1 → h2 → h3`; both heads are linear
/// `h3 → latent_dim`. The decoder mirrors the trunk:
/// `latent_dim → h3 → h2 → h1 → data_dim` with a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub hidden: [usize; 3],
    pub encoder_activations: [Activation; 3],
    pub decoder_activations: [Activation; 3],
}

impl Architecture {
    pub const DEFAULT_HIDDEN: [usize; 3] = [50, 100, 100];
    pub const DEFAULT_LATENT_DIM: usize = 2;

    pub fn new(data_dim: usize, latent_dim: usize, hidden: [usize; 3]) -> Self {
        Architecture {
            data_dim,
            latent_dim,
            hidden,
            encoder_activations: [Activation::Selu, Activation::Selu, Activation::LogSigmoid],
            decoder_activations: [Activation::Tanh; 3],
        }
    }

    pub fn encoder_trunk_specs(&self) -> Vec<LayerSpec> {
        let [h1, h2, h3] = self.hidden;
        let a = self.encoder_activations;
        vec![
            LayerSpec::new(self.data_dim, h1, a[0]),
            LayerSpec::new(h1, h2, a[1]),
            LayerSpec::new(h2, h3, a[2]),
        ]
    }

    pub fn encoder_head_spec(&self) -> LayerSpec {
        LayerSpec::new(self.hidden[2], self.latent_dim, Activation::Identity)
    }

    pub fn decoder_specs(&self) -> Vec<LayerSpec> {
        let [h1, h2, h3] = self.hidden;
        let a = self.decoder_activations;
        vec![
            LayerSpec::new(self.latent_dim, h3, a[0]),
            LayerSpec::new(h3, h2, a[1]),
            LayerSpec::new(h2, h1, a[2]),
            LayerSpec::new(h1, self.data_dim, Activation::Identity),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub trunk: MlpParams,
    pub head_mu: MlpParams,
    pub head_logvar: MlpParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub mean_net: MlpParams,
    /// `log σ_θ²` per data coordinate.
    pub log_sigma_sq: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboValue {
    pub total: f64,
    pub kl_term: f64,
    pub recon_term: f64,
    pub n_mc: usize,
}

/// Gradients of the ELBO estimator, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboGrads {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let head = [arch.encoder_head_spec()];
        Ok(EncoderParams {
            trunk: MlpParams::init(&arch.encoder_trunk_specs(), rng)?,
            head_mu: MlpParams::init(&head, rng)?,
            head_logvar: MlpParams::init(&head, rng)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        self.head_mu.validate()?;
        self.head_logvar.validate()?;
        check_len("encoder mean head input", self.trunk.out_dim(), self.head_mu.in_dim())?;
        check_len(
            "encoder log-variance head input",
            self.trunk.out_dim(),
            self.head_logvar.in_dim(),
        )?;
        check_len(
            "encoder head outputs",
            self.head_mu.out_dim(),
            self.head_logvar.out_dim(),
        )
    }

    pub fn data_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.head_mu.out_dim()
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            trunk: self.trunk.zeros_like(),
            head_mu: self.head_mu.zeros_like(),
            head_logvar: self.head_logvar.zeros_like(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params() + self.head_mu.num_params() + self.head_logvar.num_params()
    }

    pub fn append_flat(&self, out: &mut Vec<f64>) {
        self.trunk.append_flat(out);
        self.head_mu.append_flat(out);
        self.head_logvar.append_flat(out);
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("encoder flat vector", self.num_params(), flat.len())?;
        let (a, rest) = flat.split_at(self.trunk.num_params());
        let (b, c) = rest.split_at(self.head_mu.num_params());
        self.trunk.set_flat(a)?;
        self.head_mu.set_flat(b)?;
        self.head_logvar.set_flat(c)
    }
}

impl DecoderParams {
    /// Glorot-initialized mean network and unit variances.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        Ok(DecoderParams {
            mean_net: MlpParams::init(&arch.decoder_specs(), rng)?,
            log_sigma_sq: vec![0.0; arch.data_dim],
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.mean_net.validate()?;
        check_len("decoder log-variance", self.mean_net.out_dim(), self.log_sigma_sq.len())?;
        if self.log_sigma_sq.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder log-variance".into()));
        }
        Ok(())
    }

    pub fn data_dim(&self) -> usize {
        self.mean_net.out_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean_net.in_dim()
    }

    pub fn zeros_like(&self) -> Self {
        DecoderParams {
            mean_net: self.mean_net.zeros_like(),
            log_sigma_sq: vec![0.0; self.log_sigma_sq.len()],
        }
    }

    pub fn num_params(&self) -> usize {
        self.mean_net.num_params() + self.log_sigma_sq.len()
    }

    /// Mean-network parameters first, then the log-variances.
    pub fn append_flat(&self, out: &mut Vec<f64>) {
        self.mean_net.append_flat(out);
        out.extend_from_slice(&self.log_sigma_sq);
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("decoder flat vector", self.num_params(), flat.len())?;
        let (a, b) = flat.split_at(self.mean_net.num_params());
        self.mean_net.set_flat(a)?;
        self.log_sigma_sq.copy_from_slice(b);
        Ok(())
    }

    pub fn mean(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.mean_net.predict(z)
    }

    /// Draws `x ~ N(μ_θ(z), diag(σ_θ²))`.
    pub fn sample<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let mut x = self.mean(z)?;
        for (xj, ls) in x.iter_mut().zip(&self.log_sigma_sq) {
            let e: f64 = rng.sample(StandardNormal);
            *xj += (0.5 * ls).exp() * e;
        }
        Ok(x)
    }
}

/// Recorded forward pass through the encoder.
pub struct EncoderPass {
    pub latent: GaussianLatent,
    trunk_tape: Tape,
    mu_tape: Tape,
    logvar_tape: Tape,
}

pub fn encode(enc: &EncoderParams, x: &[f64]) -> Result<GaussianLatent> {
    let h = enc.trunk.predict(x)?;
    Ok(GaussianLatent {
        mu: enc.head_mu.predict(&h)?,
        log_var: enc.head_logvar.predict(&h)?,
    })
}

pub fn encode_recorded(enc: &EncoderParams, x: &[f64]) -> Result<EncoderPass> {
    let (h, trunk_tape) = enc.trunk.forward(x)?;
    let (mu, mu_tape) = enc.head_mu.forward(&h)?;
    let (log_var, logvar_tape) = enc.head_logvar.forward(&h)?;
    Ok(EncoderPass {
        latent: GaussianLatent { mu, log_var },
        trunk_tape,
        mu_tape,
        logvar_tape,
    })
}

/// `z = μ + exp(½ log σ²) ⊙ ε`.
pub fn reparameterize(lat: &GaussianLatent, eps: &[f64]) -> Result<Vec<f64>> {
    check_len("reparametrization noise", lat.mu.len(), eps.len())?;
    Ok(lat
        .mu
        .iter()
        .zip(&lat.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Log-density of a diagonal Gaussian given its mean and log-variances.
pub fn diag_gaussian_log_pdf(x: &[f64], mean: &[f64], log_var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(log_var)
        .map(|((xi, m), lv)| {
            let r = xi - m;
            -0.5 * (LN_2PI + lv + r * r * (-lv).exp())
        })
        .sum()
}

/// `log p(z)` under the standard normal CV prior.
pub fn standard_normal_log_pdf(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| LN_2PI + v * v).sum::<f64>()
}

pub fn decode_log_density(dec: &DecoderParams, x: &[f64], z: &[f64]) -> Result<f64> {
    check_len("decoder data dim", dec.data_dim(), x.len())?;
    let mean = dec.mean(z)?;
    Ok(diag_gaussian_log_pdf(x, &mean, &dec.log_sigma_sq))
}

pub fn latent_log_density(lat: &GaussianLatent, z: &[f64]) -> Result<f64> {
    check_len("latent dim", lat.mu.len(), z.len())?;
    Ok(diag_gaussian_log_pdf(z, &lat.mu, &lat.log_var))
}

/// `KL(N(μ, diag σ²) ‖ N(0, I))`.
pub fn kl_diag_gaussian_to_standard(lat: &GaussianLatent) -> f64 {
    lat.mu
        .iter()
        .zip(&lat.log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// `∂ log p_θ(x|z) / ∂ log σ_θ,j²` including the normalization term.
pub fn grad_log_sigma_theta(dec: &DecoderParams, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    check_len("decoder data dim", dec.data_dim(), x.len())?;
    let mean = dec.mean(z)?;
    Ok(x.iter()
        .zip(&mean)
        .zip(&dec.log_sigma_sq)
        .map(|((xj, m), ls)| {
            let r = xj - m;
            -0.5 + 0.5 * r * r * (-ls).exp()
        })
        .collect())
}

/// Standard-normal draws for `batch_len` data, `n_mc` samples each, in
/// datum-major then sample-major then coordinate order.
pub fn draw_noise<R: Rng + ?Sized>(
    rng: &mut R,
    batch_len: usize,
    n_mc: usize,
    latent_dim: usize,
) -> Vec<Vec<Vec<f64>>> {
    (0..batch_len)
        .map(|_| {
            (0..n_mc)
                .map(|_| (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect()
        })
        .collect()
}

/// Minibatch ELBO estimator and its gradients with fresh noise from `rng`.
pub fn elbo_minibatch<R: Rng + ?Sized>(
    enc: &EncoderParams,
    dec: &DecoderParams,
    batch: &[&[f64]],
    n_total: usize,
    n_mc: usize,
    rng: &mut R,
) -> Result<(ElboValue, ElboGrads)> {
    if n_mc == 0 {
        return Err(Error::invalid("number of MC samples must be at least 1"));
    }
    let noise = draw_noise(rng, batch.len(), n_mc, enc.latent_dim());
    elbo_with_noise(enc, dec, batch, n_total, &noise)
}

/// Minibatch ELBO estimator with frozen noise `noise[i][l]`.
///
/// Returns `(N/M) Σ_i [−KL(q(z|x_i) ‖ p(z)) + (1/L) Σ_l log p_θ(x_i | z_il)]`
/// and its exact gradient with respect to every encoder and decoder parameter.
pub fn elbo_with_noise(
    enc: &EncoderParams,
    dec: &DecoderParams,
    batch: &[&[f64]],
    n_total: usize,
    noise: &[Vec<Vec<f64>>],
) -> Result<(ElboValue, ElboGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.len() > n_total {
        return Err(Error::invalid(format!(
            "minibatch size {} exceeds dataset size {n_total}",
            batch.len()
        )));
    }
    check_len("noise batch", batch.len(), noise.len())?;
    check_len("encoder/decoder latent dim", enc.latent_dim(), dec.latent_dim())?;
    let n_mc = noise[0].len();
    if n_mc == 0 {
        return Err(Error::invalid("number of MC samples must be at least 1"));
    }
    let scale = n_total as f64 / batch.len() as f64;
    let inv_l = 1.0 / n_mc as f64;
    let inv_var: Vec<f64> = dec.log_sigma_sq.iter().map(|ls| (-ls).exp()).collect();

    let mut grads = ElboGrads {
        encoder: enc.zeros_like(),
        decoder: dec.zeros_like(),
    };
    let mut kl_sum = 0.0;
    let mut recon_sum = 0.0;
    let latent_dim = enc.latent_dim();

    for (x, eps_i) in batch.iter().zip(noise) {
        check_len("configuration length", dec.data_dim(), x.len())?;
        check_len("noise samples", n_mc, eps_i.len())?;
        let pass = encode_recorded(enc, x)?;
        let lat = &pass.latent;
        let sd: Vec<f64> = lat.log_var.iter().map(|lv| (0.5 * lv).exp()).collect();

        // d(-KL)/dμ = -μ, d(-KL)/dlogσ² = -½(σ² - 1)
        let mut d_mu: Vec<f64> = lat.mu.iter().map(|m| -scale * m).collect();
        let mut d_lv: Vec<f64> = lat.log_var.iter().map(|lv| -scale * 0.5 * (lv.exp() - 1.0)).collect();
        kl_sum += kl_diag_gaussian_to_standard(lat);

        for eps in eps_i {
            check_len("noise dim", latent_dim, eps.len())?;
            let z: Vec<f64> = lat.mu.iter().zip(&sd).zip(eps).map(|((m, s), e)| m + s * e).collect();
            let (mean, tape) = dec.mean_net.forward(&z)?;
            let mut out_grad = Vec::with_capacity(mean.len());
            let mut log_p = 0.0;
            for (j, (xj, mj)) in x.iter().zip(&mean).enumerate() {
                let r = xj - mj;
                let r2w = r * r * inv_var[j];
                log_p += -0.5 * (LN_2PI + dec.log_sigma_sq[j] + r2w);
                out_grad.push(scale * inv_l * r * inv_var[j]);
                grads.decoder.log_sigma_sq[j] += scale * inv_l * (-0.5 + 0.5 * r2w);
            }
            recon_sum += inv_l * log_p;
            let dz = dec
                .mean_net
                .backward_into(&tape, &out_grad, &mut grads.decoder.mean_net)?;
            for k in 0..latent_dim {
                d_mu[k] += dz[k];
                d_lv[k] += dz[k] * eps[k] * 0.5 * sd[k];
            }
        }

        let dh_mu = enc
            .head_mu
            .backward_into(&pass.mu_tape, &d_mu, &mut grads.encoder.head_mu)?;
        let dh_lv = enc
            .head_logvar
            .backward_into(&pass.logvar_tape, &d_lv, &mut grads.encoder.head_logvar)?;
        let dh: Vec<f64> = dh_mu.iter().zip(&dh_lv).map(|(a, b)| a + b).collect();
        enc.trunk
            .backward_into(&pass.trunk_tape, &dh, &mut grads.encoder.trunk)?;
    }

    let kl_term = scale * kl_sum;
    let recon_term = scale * recon_sum;
    let value = ElboValue {
        total: recon_term - kl_term,
        kl_term,
        recon_term,
        n_mc,
    };
    if !value.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "ELBO estimate (kl {kl_term}, recon {recon_term})"
        )));
    }
    Ok((value, grads))
}

/// Gradient of `Σ_i (1/L) Σ_l log p_θ(x_i | z_il)` with respect to the
/// decoder only, at fixed latent samples `latents[i][l]`.
pub fn decoder_log_lik_grad(dec: &DecoderParams, data: &[&[f64]], latents: &[Vec<Vec<f64>>]) -> Result<DecoderParams> {
    check_len("latent samples", data.len(), latents.len())?;
    let mut grads = dec.zeros_like();
    let inv_var: Vec<f64> = dec.log_sigma_sq.iter().map(|ls| (-ls).exp()).collect();
    for (x, zs) in data.iter().zip(latents) {
        let inv_l = 1.0 / zs.len() as f64;
        for z in zs {
            let (mean, tape) = dec.mean_net.forward(z)?;
            let mut out_grad = Vec::with_capacity(mean.len());
            for (j, (xj, mj)) in x.iter().zip(&mean).enumerate() {
                let r = xj - mj;
                out_grad.push(inv_l * r * inv_var[j]);
                grads.log_sigma_sq[j] += inv_l * (-0.5 + 0.5 * r * r * inv_var[j]);
            }
            dec.mean_net.backward_into(&tape, &out_grad, &mut grads.mean_net)?;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn tiny_arch() -> Architecture {
        Architecture::new(6, 2, [4, 5, 4])
    }

    fn randomized(arch: &Architecture, seed: u64) -> (EncoderParams, DecoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = EncoderParams::init(arch, &mut rng).unwrap();
        let mut dec = DecoderParams::init(arch, &mut rng).unwrap();
        let mut flat = Vec::new();
        enc.append_flat(&mut flat);
        for v in &mut flat {
            *v += rng.gen_range(-0.2..0.2);
        }
        enc.set_flat(&flat).unwrap();
        for v in &mut dec.log_sigma_sq {
            *v = rng.gen_range(-0.5..0.5);
        }
        (enc, dec)
    }

    #[test]
    fn zero_heads_encode_to_standard_normal() {
        let arch = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut enc = EncoderParams::init(&arch, &mut rng).unwrap();
        enc.head_mu = enc.head_mu.zeros_like();
        enc.head_logvar = enc.head_logvar.zeros_like();
        let lat = encode(&enc, &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        assert_eq!(lat.mu, vec![0.0, 0.0]);
        assert_eq!(lat.log_var, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_trunk_gives_head_biases() {
        let arch = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut enc = EncoderParams::init(&arch, &mut rng).unwrap();
        enc.trunk = enc.trunk.zeros_like();
        enc.head_mu.layers[0].bias = vec![0.5, -1.5];
        enc.head_logvar.layers[0].bias = vec![-2.0, 0.25];
        // log-sigmoid(0) = -ln 2 feeds both heads, so fix the weights to zero too
        enc.head_mu.layers[0].weight.iter_mut().for_each(|w| *w = 0.0);
        enc.head_logvar.layers[0].weight.iter_mut().for_each(|w| *w = 0.0);
        for x in [[0.0; 6], [1.0, -2.0, 3.0, 0.5, 0.1, 9.0]] {
            let lat = encode(&enc, &x).unwrap();
            assert_eq!(lat.mu, vec![0.5, -1.5]);
            assert_eq!(lat.log_var, vec![-2.0, 0.25]);
        }
    }

    #[test]
    fn encode_matches_manual_composition() {
        let (enc, _) = randomized(&tiny_arch(), 3);
        let x = [0.3, -0.2, 0.9, 1.1, -0.7, 0.0];
        let h = enc.trunk.forward(&x).unwrap().0;
        let lat = encode(&enc, &x).unwrap();
        assert_eq!(lat.mu, enc.head_mu.forward(&h).unwrap().0);
        assert_eq!(lat.log_var, enc.head_logvar.forward(&h).unwrap().0);
        assert!(encode(&enc, &x[..5]).is_err());
    }

    #[test]
    fn reparameterize_cases() {
        let std_lat = GaussianLatent {
            mu: vec![0.0, 0.0],
            log_var: vec![0.0, 0.0],
        };
        assert_eq!(reparameterize(&std_lat, &[0.3, -1.0]).unwrap(), vec![0.3, -1.0]);
        let lat = GaussianLatent {
            mu: vec![1.0],
            log_var: vec![4f64.ln()],
        };
        assert!((reparameterize(&lat, &[0.5]).unwrap()[0] - 2.0).abs() < 1e-15);
        assert_eq!(reparameterize(&lat, &[0.0]).unwrap(), vec![1.0]);
        assert!(reparameterize(&lat, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn decode_log_density_cases() {
        let (_, mut dec) = randomized(&tiny_arch(), 4);
        dec.log_sigma_sq = vec![0.0; 6];
        let z = [0.4, -0.3];
        let mean = dec.mean(&z).unwrap();
        let at_mean = decode_log_density(&dec, &mean, &z).unwrap();
        assert!((at_mean + 3.0 * (2.0 * PI).ln()).abs() < 1e-12);

        dec.log_sigma_sq = vec![2f64.ln(); 6];
        let doubled = decode_log_density(&dec, &mean, &z).unwrap();
        assert!((at_mean - doubled - 3.0 * 2f64.ln()).abs() < 1e-12);

        // per-coordinate scalar oracle
        dec.log_sigma_sq = vec![-0.3, 0.1, 0.7, -1.2, 0.0, 0.4];
        let x = [0.5, -0.1, 0.2, 1.3, -0.8, 0.05];
        let oracle: f64 = (0..6)
            .map(|j| {
                let var = dec.log_sigma_sq[j].exp();
                let r = x[j] - mean[j];
                -0.5 * (2.0 * PI * var).ln() - r * r / (2.0 * var)
            })
            .sum();
        assert!((decode_log_density(&dec, &x, &z).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn kl_cases() {
        let zero = GaussianLatent {
            mu: vec![0.0; 3],
            log_var: vec![0.0; 3],
        };
        assert_eq!(kl_diag_gaussian_to_standard(&zero), 0.0);
        let one = GaussianLatent {
            mu: vec![1.0],
            log_var: vec![0.0],
        };
        assert!((kl_diag_gaussian_to_standard(&one) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn grad_log_sigma_cases() {
        let (_, mut dec) = randomized(&tiny_arch(), 5);
        let z = [0.1, 0.2];
        let mean = dec.mean(&z).unwrap();
        assert!(grad_log_sigma_theta(&dec, &mean, &z)
            .unwrap()
            .iter()
            .all(|&g| (g + 0.5).abs() < 1e-15));
        // residual equal to one standard deviation is stationary
        let x: Vec<f64> = mean
            .iter()
            .zip(&dec.log_sigma_sq)
            .map(|(m, ls)| m + (0.5 * ls).exp())
            .collect();
        assert!(grad_log_sigma_theta(&dec, &x, &z)
            .unwrap()
            .iter()
            .all(|g| g.abs() < 1e-12));
        // finite differences of the log-density
        let x = [0.3, -0.4, 0.1, 0.9, -1.0, 0.2];
        let g = grad_log_sigma_theta(&dec, &x, &z).unwrap();
        let h = 1e-6;
        for (j, gj) in g.iter().enumerate() {
            let base = dec.log_sigma_sq[j];
            dec.log_sigma_sq[j] = base + h;
            let up = decode_log_density(&dec, &x, &z).unwrap();
            dec.log_sigma_sq[j] = base - h;
            let down = decode_log_density(&dec, &x, &z).unwrap();
            dec.log_sigma_sq[j] = base;
            assert!((gj - (up - down) / (2.0 * h)).abs() < 1e-6);
        }
    }

    #[test]
    fn full_batch_has_unit_scale_and_plugs_in_constants() {
        let arch = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut enc = EncoderParams::init(&arch, &mut rng).unwrap();
        enc.head_mu = enc.head_mu.zeros_like();
        enc.head_logvar = enc.head_logvar.zeros_like();
        let mut dec = DecoderParams::init(&arch, &mut rng).unwrap();
        dec.mean_net = dec.mean_net.zeros_like();
        let data = [
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            vec![-1.0, 0.0, 1.0, 2.0, -0.5, 0.25],
        ];
        let batch: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
        let noise = vec![vec![vec![0.0, 0.0]]; 2];
        let (val, _) = elbo_with_noise(&enc, &dec, &batch, 2, &noise).unwrap();
        let expect: f64 = data
            .iter()
            .map(|x| -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 3.0 * (2.0 * PI).ln())
            .sum();
        assert_eq!(val.kl_term, 0.0);
        assert!((val.total - expect).abs() < 1e-12);
        assert!((val.total - (val.recon_term - val.kl_term)).abs() < 1e-12);

        // half batch is rescaled by N/M = 2
        let (half, _) = elbo_with_noise(&enc, &dec, &batch[..1], 2, &noise[..1]).unwrap();
        let first: f64 = -0.5 * data[0].iter().map(|v| v * v).sum::<f64>() - 3.0 * (2.0 * PI).ln();
        assert!((half.total - 2.0 * first).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (enc, dec) = randomized(&tiny_arch(), 7);
        assert!(matches!(
            elbo_with_noise(&enc, &dec, &[], 4, &[]),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn decoder_only_gradient_matches_full_estimator() {
        let arch = tiny_arch();
        let (enc, dec) = randomized(&arch, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let batch: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
        let noise = draw_noise(&mut rng, 5, 2, 2);
        let (_, full) = elbo_with_noise(&enc, &dec, &batch, 5, &noise).unwrap();
        let latents: Vec<Vec<Vec<f64>>> = batch
            .iter()
            .zip(&noise)
            .map(|(x, eps)| {
                let lat = encode(&enc, x).unwrap();
                eps.iter().map(|e| reparameterize(&lat, e).unwrap()).collect()
            })
            .collect();
        let dec_only = decoder_log_lik_grad(&dec, &batch, &latents).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        full.decoder.append_flat(&mut a);
        dec_only.append_flat(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}
