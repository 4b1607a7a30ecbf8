mod common;

use common::*;
use cvdisc::laplace::LaplacePosterior;
use cvdisc::observables::*;
use cvdisc::sampler::{mwg_run_seeded, ChainConfig};
use cvdisc::trainer::{train, TrainConfig};
use cvdisc::vae::Architecture;
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairwise form `Rg² = Σ_pq m_p m_q ‖x_p − x_q‖² / (2M²)`, no centroid.
fn naive_rg(x: &[f64], m: &[f64]) -> f64 {
    let total: f64 = m.iter().sum();
    let mut acc = 0.0;
    for p in 0..m.len() {
        for q in 0..m.len() {
            let d2: f64 = (0..3).map(|k| (x[3 * p + k] - x[3 * q + k]).powi(2)).sum();
            acc += m[p] * m[q] * d2;
        }
    }
    (acc / (2.0 * total * total)).sqrt()
}

/// Projections of the outer bonds onto the plane normal to the central bond.
fn naive_dihedral(p: [[f64; 3]; 4]) -> f64 {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let b0 = sub(p[0], p[1]);
    let b1 = sub(p[2], p[1]);
    let b2 = sub(p[3], p[2]);
    let len = dot(b1, b1).sqrt();
    let u = [b1[0] / len, b1[1] / len, b1[2] / len];
    let v = sub(b0, [u[0] * dot(b0, u), u[1] * dot(b0, u), u[2] * dot(b0, u)]);
    let w = sub(b2, [u[0] * dot(b2, u), u[1] * dot(b2, u), u[2] * dot(b2, u)]);
    let angle = dot(cross(u, v), w).atan2(dot(v, w)).to_degrees();
    if angle == -180.0 {
        180.0
    } else {
        angle
    }
}

fn vec3(x: &[f64], p: usize) -> Vector3<f64> {
    Vector3::new(x[3 * p], x[3 * p + 1], x[3 * p + 2])
}

fn rigid(x: &[f64], rot: &Rotation3<f64>, shift: Vector3<f64>) -> Vec<f64> {
    x.chunks_exact(3)
        .flat_map(|p| {
            let q = rot * Vector3::new(p[0], p[1], p[2]) + shift;
            [q.x, q.y, q.z]
        })
        .collect()
}

#[test]
fn brute_force_agreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let p = 12;
        let x: Vec<f64> = (0..3 * p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m: Vec<f64> = (0..p).map(|_| rng.gen_range(0.5..16.0)).collect();
        assert!((radius_of_gyration(&x, &m).unwrap() - naive_rg(&x, &m)).abs() < 1e-12);
        let pts = [0, 1, 2, 3].map(|i| [x[3 * i], x[3 * i + 1], x[3 * i + 2]]);
        let d = dihedral_angle(vec3(&x, 0), vec3(&x, 1), vec3(&x, 2), vec3(&x, 3)).unwrap();
        assert!((d - naive_dihedral(pts)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn rigid_motion_invariance(
        coords in prop::collection::vec(-2.0f64..2.0, 15),
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in -3.1f64..3.1,
        shift in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let n = Vector3::from(axis);
        prop_assume!(n.norm() > 1e-3);
        let rot = Rotation3::from_scaled_axis(n.normalize() * angle);
        let moved = rigid(&coords, &rot, Vector3::from(shift));
        let m = [12.011, 1.008, 14.007, 15.999, 12.011];
        let rg = radius_of_gyration(&coords, &m).unwrap();
        prop_assert!((rg - radius_of_gyration(&moved, &m).unwrap()).abs() < 1e-12);
        if let Ok(d) = dihedral_of(&coords, [0, 1, 2, 3]) {
            let dm = dihedral_of(&moved, [0, 1, 2, 3]).unwrap();
            let diff = (d - dm).abs();
            prop_assert!(diff.min(360.0 - diff) < 1e-10);
        }
    }

    #[test]
    fn ramachandran_mass_is_conserved(seed in 0u64..1000, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let top = AtomTopology::alanine_dipeptide();
        let configs: Vec<Vec<f64>> = (0..n).map(|_| (0..66).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let rama = ramachandran(&configs, &top, RAMACHANDRAN_BINS).unwrap();
        prop_assert!((rama.pooled.integral() - 1.0).abs() < 1e-9);
        prop_assert!(rama.pooled.density.iter().all(|d| *d >= 0.0));
    }

    #[test]
    fn at_most_one_label(phi in -180.0f64..=180.0, psi in -180.0f64..=180.0) {
        let r = ConformationRegions::default();
        let hits = [&r.alpha, &r.beta1, &r.beta2].iter().filter(|g| g.contains(phi, psi)).count();
        prop_assert!(hits <= 1);
        prop_assert_eq!(hits == 0, classify_conformation(phi, psi, &r) == ConformationLabel::Unclassified);
    }
}

#[test]
fn pooled_histogram_is_mean_over_fifteen_residues() {
    let atoms = 4 + 15 * 2;
    let residues: Vec<ResidueDihedrals> = (0..15)
        .map(|r| ResidueDihedrals {
            phi: [2 * r, 2 * r + 1, 2 * r + 2, 2 * r + 3],
            psi: [2 * r + 1, 2 * r + 2, 2 * r + 3, 2 * r + 4],
        })
        .collect();
    let top = AtomTopology::new(vec!["C".into(); atoms], vec![12.011; atoms], residues).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let configs: Vec<Vec<f64>> = (0..30)
        .map(|_| (0..3 * atoms).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let rama = ramachandran(&configs, &top, RAMACHANDRAN_BINS).unwrap();
    assert_eq!(rama.per_residue.len(), 15);
    for (k, d) in rama.pooled.density.iter().enumerate() {
        let m = rama.per_residue.iter().map(|h| h.density[k]).sum::<f64>() / 15.0;
        assert!((d - m).abs() < 1e-12);
    }
}

#[test]
fn sampled_rg_histogram_integrates_to_one() {
    let synth = cvdisc::data::generate_synthetic(&cvdisc::data::SyntheticSpec::two_mode(4, 3), 100).unwrap();
    let arch = Architecture::new(12, 2, [6, 8, 8]);
    let (enc, dec) = random_model(&arch, 1);
    let report = train(
        &synth.dataset.configs,
        enc,
        dec,
        &TrainConfig {
            max_epochs: 100,
            ..Default::default()
        },
    )
    .unwrap();
    let chain = mwg_run_seeded(
        &report.encoder,
        &report.decoder,
        &synth.dataset.configs[0],
        &ChainConfig::default(),
        4,
    )
    .unwrap();
    assert_eq!(chain.samples.len(), 10_000);
    let rg: Vec<f64> = chain
        .samples
        .iter()
        .map(|x| radius_of_gyration(x, &synth.dataset.masses).unwrap())
        .collect();
    let h = rg_histogram(&rg, DEFAULT_BAND_BINS).unwrap();
    assert!((h.integral() - 1.0).abs() < 1e-9);
}

fn band_setup() -> (cvdisc::vae::EncoderParams, cvdisc::vae::DecoderParams, Vec<f64>) {
    let lg = toy_linear_gaussian();
    (lg.exact_encoder(0.0).unwrap(), lg.decoder(), lg.bias.clone())
}

fn first_coordinate(x: &[f64]) -> cvdisc::Result<f64> {
    Ok(x[0])
}

#[test]
fn degenerate_posterior_collapses_the_band() {
    let (enc, dec, x0) = band_setup();
    let n = dec.mean_net.num_params();
    let post = LaplacePosterior {
        mu_l: dec.mean_net.to_flat(),
        sigma_l_sq: vec![0.0; n],
        floored: 0,
    };
    let config = BandConfig {
        n_chains: 8,
        chain: ChainConfig {
            steps: 500,
            ..Default::default()
        },
        ..Default::default()
    };
    let band = credible_band(&post, &enc, &dec, &x0, first_coordinate, &config).unwrap();
    assert_eq!(band.lower, band.map_curve);
    assert_eq!(band.upper, band.map_curve);
    assert_eq!(band.mean_lower, band.map_mean);
    assert_eq!(band.mean_width(), 0.0);
}

#[test]
fn band_quantiles_are_ordered() {
    let (enc, dec, x0) = band_setup();
    let n = dec.mean_net.num_params();
    let post = LaplacePosterior {
        mu_l: dec.mean_net.to_flat(),
        sigma_l_sq: vec![0.01; n],
        floored: 0,
    };
    for j in [2, 3, 17] {
        let config = BandConfig {
            n_chains: j,
            chain: ChainConfig {
                steps: 300,
                ..Default::default()
            },
            bins: 30,
            seed: j as u64,
            ..Default::default()
        };
        let band = credible_band(&post, &enc, &dec, &x0, first_coordinate, &config).unwrap();
        assert!(band.lower.iter().zip(&band.upper).all(|(l, u)| l <= u));
        assert!(band.mean_lower <= band.mean_upper);
        assert!(band.mean_width() > 0.0);
        let text = format_band(&band);
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 30);
    }
    let bad = BandConfig {
        n_chains: 1,
        ..Default::default()
    };
    assert!(credible_band(&post, &enc, &dec, &x0, first_coordinate, &bad).is_err());
    let bad = BandConfig {
        levels: (0.9, 0.1),
        ..Default::default()
    };
    assert!(credible_band(&post, &enc, &dec, &x0, first_coordinate, &bad).is_err());
}

#[test]
fn default_band_settings() {
    let c = BandConfig::default();
    assert_eq!(c.n_chains, 3000);
    assert_eq!(c.levels, (0.05, 0.95));
    assert_eq!(c.bins, 100);
    assert_eq!(c.chain.steps, 10_000);
}
