#![allow(dead_code)]

use cvdisc::linear_gaussian::LinearGaussian;
use cvdisc::vae::{Architecture, DecoderParams, ElboGrads, EncoderParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn flat(enc: &EncoderParams, dec: &DecoderParams) -> Vec<f64> {
    let mut v = Vec::new();
    enc.append_flat(&mut v);
    dec.append_flat(&mut v);
    v
}

pub fn set_flat(enc: &mut EncoderParams, dec: &mut DecoderParams, v: &[f64]) {
    let k = enc.num_params();
    enc.set_flat(&v[..k]).unwrap();
    dec.set_flat(&v[k..]).unwrap();
}

pub fn grads_flat(g: &ElboGrads) -> Vec<f64> {
    flat(&g.encoder, &g.decoder)
}

pub fn random_model(arch: &Architecture, seed: u64) -> (EncoderParams, DecoderParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = EncoderParams::init(arch, &mut rng).unwrap();
    let mut dec = DecoderParams::init(arch, &mut rng).unwrap();
    for (k, ls) in dec.log_sigma_sq.iter_mut().enumerate() {
        *ls = -0.5 + 0.1 * k as f64;
    }
    (enc, dec)
}

/// 2-D data, 1-D latent.
pub fn toy_linear_gaussian() -> LinearGaussian {
    LinearGaussian::new(vec![1.2, -0.7], vec![0.3, -0.1], vec![0.4, 0.25], 1).unwrap()
}

/// Draws `n` points from the marginal of `lg`.
pub fn sample_marginal(lg: &LinearGaussian, n: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = lg.latent_dim;
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            (0..lg.data_dim())
                .map(|j| {
                    let e: f64 = rng.sample(StandardNormal);
                    let wz: f64 = (0..d).map(|i| lg.weight[j * d + i] * z[i]).sum();
                    wz + lg.bias[j] + lg.noise_var[j].sqrt() * e
                })
                .collect()
        })
        .collect()
}
