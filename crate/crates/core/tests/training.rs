mod common;

use common::*;
use cvdisc::ard::{sparsity_fraction, INACTIVE_THRESHOLD};
use cvdisc::data::{generate_synthetic, SyntheticSpec};
use cvdisc::linear_gaussian::LinearGaussian;
use cvdisc::stats::{mean, variance};
use cvdisc::trainer::*;
use cvdisc::vae::Architecture;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// One-factor model on three coordinates: the MLE loadings follow from the
/// sample covariance, `w₁² = S₁₂S₁₃/S₂₃` and cyclic.
fn factor_mle(data: &[Vec<f64>]) -> [f64; 3] {
    let n = data.len() as f64;
    let m: Vec<f64> = (0..3).map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let s = |a: usize, b: usize| data.iter().map(|x| (x[a] - m[a]) * (x[b] - m[b])).sum::<f64>() / n;
    let (s12, s13, s23) = (s(0, 1), s(0, 2), s(1, 2));
    [
        (s12 * s13 / s23).sqrt(),
        (s12 * s23 / s13).sqrt(),
        (s13 * s23 / s12).sqrt(),
    ]
}

#[test]
fn linear_toy_recovers_closed_form_mle() {
    let truth = LinearGaussian::new(vec![1.0, -0.8, 0.6], vec![0.5, 0.0, -0.3], vec![0.2, 0.3, 0.25], 1).unwrap();
    let data = sample_marginal(&truth, 2000, 21);
    let start = LinearGaussian::new(vec![0.3, 0.2, 0.1], vec![0.0; 3], vec![1.0; 3], 1).unwrap();
    let config = TrainConfig {
        ard: false,
        minibatch_size: Some(100),
        max_epochs: 1500,
        seed: 2,
        ..Default::default()
    };
    let report = train(&data, start.exact_encoder(0.0).unwrap(), start.decoder(), &config).unwrap();
    let w = &report.decoder.mean_net.layers[0].weight;
    let mle = factor_mle(&data);
    for j in 0..3 {
        assert!(
            (w[j].abs() - mle[j]).abs() < 0.05 * mle[j],
            "loading {j}: trained {} vs MLE {}",
            w[j],
            mle[j]
        );
    }
    // the overall sign is not identifiable, the relative signs are
    assert!(w[0] * w[1] < 0.0 && w[0] * w[2] > 0.0);
}

fn synthetic(n: usize, seed: u64) -> Vec<Vec<f64>> {
    generate_synthetic(&SyntheticSpec::two_mode(4, seed), n)
        .unwrap()
        .dataset
        .configs
}

#[test]
fn seeded_training_is_bitwise_reproducible() {
    let data = synthetic(120, 1);
    let arch = Architecture::new(12, 2, [6, 8, 8]);
    let config = TrainConfig {
        max_epochs: 30,
        seed: 17,
        ..Default::default()
    };
    let run = || {
        let (enc, dec) = random_model(&arch, 5);
        train(&data, enc, dec, &config).unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |r: &TrainReport| r.elbo_trace().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.encoder, b.encoder);
    assert_eq!(a.decoder, b.decoder);
    let c = train(
        &data,
        random_model(&arch, 5).0,
        random_model(&arch, 5).1,
        &TrainConfig { seed: 18, ..config },
    )
    .unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn ard_increases_sparsity() {
    let data = synthetic(300, 3);
    let arch = Architecture::new(12, 2, [12, 24, 24]);
    let run = |ard| {
        let (enc, dec) = random_model(&arch, 1);
        let config = TrainConfig {
            ard,
            max_epochs: 600,
            ..Default::default()
        };
        train(&data, enc, dec, &config).unwrap()
    };
    let (on, off) = (run(true), run(false));
    assert!(on.ard.is_some() && off.ard.is_none());
    assert_eq!(
        on.sparsity,
        sparsity_fraction(&on.decoder.mean_net.to_flat(), INACTIVE_THRESHOLD)
    );
    assert!(
        on.sparsity > off.sparsity,
        "ARD {} vs none {}",
        on.sparsity,
        off.sparsity
    );
}

fn converged_run(data: &[Vec<f64>], arch: &Architecture) -> (TrainReport, TrainConfig) {
    let (enc, dec) = random_model(arch, 2);
    let config = TrainConfig {
        max_epochs: 4000,
        ..Default::default()
    };
    (train(data, enc, dec, &config).unwrap(), config)
}

#[test]
fn warm_start_without_new_data_stops_immediately() {
    let data = synthetic(200, 4);
    let arch = Architecture::new(12, 2, [6, 8, 8]);
    let (report, config) = converged_run(&data, &arch);
    assert!(report.converged);
    let warm = warm_start_retrain(&report, &data, &[], &config).unwrap();
    assert!(warm.converged);
    assert_eq!(warm.epochs_run(), 0);
    assert_eq!(warm.decoder, report.decoder);
}

#[test]
fn duplicated_data_keeps_map_close() {
    let data = synthetic(200, 4);
    let arch = Architecture::new(12, 2, [6, 8, 8]);
    let (report, config) = converged_run(&data, &arch);
    let (enc0, dec0) = random_model(&arch, 2);
    let fresh_drift = distance(&flat(&report.encoder, &report.decoder), &flat(&enc0, &dec0));
    let warm = warm_start_retrain(&report, &data, &data, &config).unwrap();
    let warm_drift = distance(
        &flat(&warm.encoder, &warm.decoder),
        &flat(&report.encoder, &report.decoder),
    );
    assert!(
        warm_drift < fresh_drift,
        "warm drift {warm_drift} vs fresh {fresh_drift}"
    );
}

#[test]
fn warm_start_needs_fewer_epochs() {
    let all = synthetic(400, 6);
    let (old, new) = all.split_at(200);
    let arch = Architecture::new(12, 2, [6, 8, 8]);
    let (report, config) = converged_run(old, &arch);
    let (enc, dec) = random_model(&arch, 2);
    let cold = train(&all, enc, dec, &config).unwrap();
    let target = cold.converged_elbo().unwrap();
    let cold_epochs = epochs_to_reach(&cold.elbo_trace(), target, 1e-3).unwrap();
    // the window test can fire early on a noisy plateau, so the warm run gets
    // the cold budget with early stopping off
    let budget = TrainConfig {
        max_epochs: cold_epochs,
        convergence_tol: f64::MIN_POSITIVE,
        ..config
    };
    let warm = warm_start_retrain(&report, old, new, &budget).unwrap();
    let warm_epochs = epochs_to_reach(&warm.elbo_trace(), target, 1e-3).expect("warm run reaches the target");
    assert!(warm_epochs < cold_epochs, "warm {warm_epochs} vs cold {cold_epochs}");
}

/// The expected trace is estimated across independent training seeds; each
/// window-20 smoothed increment must not be significantly negative.
#[test]
fn smoothed_elbo_rises_in_expectation() {
    let data = synthetic(300, 8);
    let arch = Architecture::new(12, 2, [6, 8, 8]);
    let runs: Vec<Vec<f64>> = (0..6)
        .map(|seed| {
            let (enc, dec) = random_model(&arch, 2);
            let config = TrainConfig {
                max_epochs: 4000,
                seed,
                ..Default::default()
            };
            let report = train(&data, enc, dec, &config).unwrap();
            assert!(report.converged);
            let trace = report.elbo_trace();
            trace.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect()
        })
        .collect();
    let shortest = runs.iter().map(Vec::len).min().unwrap();
    let cut = (0.8 * shortest as f64) as usize;
    for k in 1..cut {
        let inc: Vec<f64> = runs.iter().map(|s| s[k] - s[k - 1]).collect();
        let se = (variance(&inc) / inc.len() as f64).sqrt();
        assert!(mean(&inc) >= -4.0 * se, "smoothed ELBO fell at window {k}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let data = synthetic(10, 0);
    let arch = Architecture::new(12, 2, [3, 3, 3]);
    let (enc, dec) = random_model(&arch, 0);
    let bad_m = TrainConfig {
        minibatch_size: Some(11),
        ..Default::default()
    };
    assert!(train(&data, enc.clone(), dec.clone(), &bad_m).is_err());
    let bad_a0 = TrainConfig {
        a0: 1e-2,
        ..Default::default()
    };
    assert!(train(&data, enc.clone(), dec.clone(), &bad_a0).is_err());
    assert!(train(&[], enc, dec, &TrainConfig::default()).is_err());
}
