//! Physical observables and their credible bands.
//!
//! Angles are degrees in (−180, 180]. Histograms store densities, so that
//! `Σ density · bin area` is the fraction of samples falling inside the grid.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::laplace::LaplacePosterior;
use crate::sampler::{mwg_run, ChainConfig};
use crate::stats::{mean, quantile_sorted};
use crate::vae::{DecoderParams, EncoderParams};

pub const RAMACHANDRAN_BINS: usize = 60;
pub const DEFAULT_BAND_BINS: usize = 100;
pub const DEFAULT_BAND_CHAINS: usize = 3000;
pub const DEFAULT_LEVELS: (f64, f64) = (0.05, 0.95);
pub const DEFAULT_RANGE_PAD: f64 = 0.1;

const ALANINE_DIPEPTIDE: &str = include_str!("../data/alanine_dipeptide.top");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidueDihedrals {
    pub phi: [usize; 4],
    pub psi: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomTopology {
    pub elements: Vec<String>,
    pub masses: Vec<f64>,
    pub residues: Vec<ResidueDihedrals>,
}

impl AtomTopology {
    pub fn new(elements: Vec<String>, masses: Vec<f64>, residues: Vec<ResidueDihedrals>) -> Result<Self> {
        let top = AtomTopology {
            elements,
            masses,
            residues,
        };
        top.validate()?;
        Ok(top)
    }

    pub fn validate(&self) -> Result<()> {
        check_len("topology elements", self.masses.len(), self.elements.len())?;
        if self.masses.is_empty() {
            return Err(Error::invalid("topology has no atoms"));
        }
        if self.masses.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::invalid("atom masses must be positive"));
        }
        let p = self.masses.len();
        for r in &self.residues {
            if r.phi.iter().chain(&r.psi).any(|&i| i >= p) {
                return Err(Error::invalid(format!(
                    "dihedral atom index out of range for {p} atoms"
                )));
            }
        }
        Ok(())
    }

    pub fn n_atoms(&self) -> usize {
        self.masses.len()
    }

    /// The bundled 22-atom alanine dipeptide topology.
    pub fn alanine_dipeptide() -> Self {
        crate::data::parse_topology(ALANINE_DIPEPTIDE, Path::new("alanine_dipeptide.top"))
            .expect("bundled topology is valid")
    }
}

fn atom(x: &[f64], p: usize) -> Vector3<f64> {
    Vector3::new(x[3 * p], x[3 * p + 1], x[3 * p + 2])
}

/// `√(Σ m_p ‖x_p − x_COM‖² / Σ m_p)`.
pub fn radius_of_gyration(x: &[f64], masses: &[f64]) -> Result<f64> {
    check_len("configuration length", 3 * masses.len(), x.len())?;
    let total: f64 = masses.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("total mass must be positive"));
    }
    let com = crate::data::center_of_mass(x, masses);
    let ss: f64 = masses
        .iter()
        .enumerate()
        .map(|(p, m)| m * (atom(x, p) - com).norm_squared())
        .sum();
    Ok((ss / total).sqrt())
}

/// Signed torsion of the chain `p1–p2–p3–p4`.
pub fn dihedral_angle(p1: Vector3<f64>, p2: Vector3<f64>, p3: Vector3<f64>, p4: Vector3<f64>) -> Result<f64> {
    let b1 = p2 - p1;
    let b2 = p3 - p2;
    let b3 = p4 - p3;
    let n1 = b1.cross(&b2);
    let n2 = b2.cross(&b3);
    let tol = 1e-12;
    if b2.norm() == 0.0 || n1.norm() <= tol * b1.norm() * b2.norm() || n2.norm() <= tol * b2.norm() * b3.norm() {
        return Err(Error::DegenerateGeometry(
            "dihedral undefined for coincident or collinear points".into(),
        ));
    }
    let y = b2.normalize().dot(&n1.cross(&n2));
    let deg = y.atan2(n1.dot(&n2)).to_degrees();
    Ok(if deg <= -180.0 { deg + 360.0 } else { deg })
}

pub fn dihedral_of(x: &[f64], idx: [usize; 4]) -> Result<f64> {
    let p = x.len() / 3;
    if idx.iter().any(|&i| i >= p) {
        return Err(Error::invalid("dihedral atom index out of range"));
    }
    dihedral_angle(atom(x, idx[0]), atom(x, idx[1]), atom(x, idx[2]), atom(x, idx[3]))
}

/// `(φ, ψ)` of every residue.
pub fn backbone_dihedrals(x: &[f64], top: &AtomTopology) -> Result<Vec<(f64, f64)>> {
    check_len("configuration length", 3 * top.n_atoms(), x.len())?;
    top.residues
        .iter()
        .map(|r| Ok((dihedral_of(x, r.phi)?, dihedral_of(x, r.psi)?)))
        .collect()
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    let k = ((v - lo) / (hi - lo) * bins as f64).floor() as usize;
    Some(k.min(bins - 1))
}

fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram1D {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram1D {
    /// Density over `bins` equal bins on `[lo, hi]`, normalized by the total
    /// number of values including any outside the range.
    pub fn from_values(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::invalid("histogram needs bins ≥ 1 and hi > lo"));
        }
        if values.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut counts = vec![0usize; bins];
        for &v in values {
            if let Some(k) = bin_index(v, lo, hi, bins) {
                counts[k] += 1;
            }
        }
        let width = (hi - lo) / bins as f64;
        let norm = values.len() as f64 * width;
        Ok(Histogram1D {
            edges: uniform_edges(lo, hi, bins),
            density: counts.iter().map(|&c| c as f64 / norm).collect(),
        })
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn integral(&self) -> f64 {
        self.edges
            .windows(2)
            .zip(&self.density)
            .map(|(w, d)| d * (w[1] - w[0]))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram2D {
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    /// Row-major, `x` bin outer.
    pub density: Vec<f64>,
}

impl Histogram2D {
    pub fn from_points(
        points: &[(f64, f64)],
        x_range: (f64, f64),
        y_range: (f64, f64),
        bins: (usize, usize),
    ) -> Result<Self> {
        let (nx, ny) = bins;
        if nx == 0 || ny == 0 || !(x_range.1 > x_range.0) || !(y_range.1 > y_range.0) {
            return Err(Error::invalid("histogram needs bins ≥ 1 and nonempty ranges"));
        }
        if points.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut counts = vec![0usize; nx * ny];
        for &(a, b) in points {
            if let (Some(i), Some(j)) = (
                bin_index(a, x_range.0, x_range.1, nx),
                bin_index(b, y_range.0, y_range.1, ny),
            ) {
                counts[i * ny + j] += 1;
            }
        }
        let area = (x_range.1 - x_range.0) / nx as f64 * (y_range.1 - y_range.0) / ny as f64;
        let norm = points.len() as f64 * area;
        Ok(Histogram2D {
            x_edges: uniform_edges(x_range.0, x_range.1, nx),
            y_edges: uniform_edges(y_range.0, y_range.1, ny),
            density: counts.iter().map(|&c| c as f64 / norm).collect(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.x_edges.len() - 1, self.y_edges.len() - 1)
    }

    pub fn integral(&self) -> f64 {
        let (nx, ny) = self.shape();
        let mut total = 0.0;
        for i in 0..nx {
            for j in 0..ny {
                let area = (self.x_edges[i + 1] - self.x_edges[i]) * (self.y_edges[j + 1] - self.y_edges[j]);
                total += self.density[i * ny + j] * area;
            }
        }
        total
    }

    /// Elementwise mean of histograms sharing one grid.
    pub fn mean_of(hists: &[Histogram2D]) -> Result<Self> {
        let first = hists.first().ok_or(Error::EmptyBatch)?;
        let mut density = vec![0.0; first.density.len()];
        for h in hists {
            if h.x_edges != first.x_edges || h.y_edges != first.y_edges {
                return Err(Error::invalid("histograms do not share a grid"));
            }
            for (d, v) in density.iter_mut().zip(&h.density) {
                *d += v / hists.len() as f64;
            }
        }
        Ok(Histogram2D {
            density,
            ..first.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ramachandran {
    pub per_residue: Vec<Histogram2D>,
    /// Mean of the per-residue histograms.
    pub pooled: Histogram2D,
}

/// `(φ, ψ)` densities on `bins × bins` cells over `[−180, 180]²`.
pub fn ramachandran(configs: &[Vec<f64>], top: &AtomTopology, bins: usize) -> Result<Ramachandran> {
    if configs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if top.residues.is_empty() {
        return Err(Error::invalid("topology defines no backbone dihedrals"));
    }
    let angles: Vec<Vec<(f64, f64)>> = configs
        .par_iter()
        .map(|x| backbone_dihedrals(x, top))
        .collect::<Result<_>>()?;
    let range = (-180.0, 180.0);
    let per_residue = (0..top.residues.len())
        .map(|r| {
            let pts: Vec<(f64, f64)> = angles.iter().map(|a| a[r]).collect();
            Histogram2D::from_points(&pts, range, range, (bins, bins))
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = Histogram2D::mean_of(&per_residue)?;
    Ok(Ramachandran { per_residue, pooled })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl Interval {
    pub fn closed(lo: f64, hi: f64) -> Self {
        Interval {
            lo,
            hi,
            lo_closed: true,
            hi_closed: true,
        }
    }

    /// `(lo, hi]`
    pub fn open_closed(lo: f64, hi: f64) -> Self {
        Interval {
            lo,
            hi,
            lo_closed: false,
            hi_closed: true,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        let above = if self.lo_closed { v >= self.lo } else { v > self.lo };
        let below = if self.hi_closed { v <= self.hi } else { v < self.hi };
        above && below
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        fn touches(lo: f64, lo_closed: bool, hi: f64, hi_closed: bool) -> bool {
            lo < hi || (lo == hi && lo_closed && hi_closed)
        }
        touches(self.lo, self.lo_closed, other.hi, other.hi_closed)
            && touches(other.lo, other.lo_closed, self.hi, self.hi_closed)
    }
}

/// Union of `φ`-interval × `ψ`-interval rectangles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub rectangles: Vec<(Interval, Interval)>,
}

impl Region {
    pub fn contains(&self, phi: f64, psi: f64) -> bool {
        self.rectangles.iter().any(|(a, b)| a.contains(phi) && b.contains(psi))
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.rectangles
            .iter()
            .any(|(a, b)| other.rectangles.iter().any(|(c, d)| a.overlaps(c) && b.overlaps(d)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConformationLabel {
    Alpha,
    Beta1,
    Beta2,
    Unclassified,
}

impl ConformationLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConformationLabel::Alpha => "alpha",
            ConformationLabel::Beta1 => "beta1",
            ConformationLabel::Beta2 => "beta2",
            ConformationLabel::Unclassified => "unclassified",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformationRegions {
    pub alpha: Region,
    pub beta1: Region,
    pub beta2: Region,
}

impl Default for ConformationRegions {
    fn default() -> Self {
        let neg_phi = Interval::closed(-180.0, 0.0);
        ConformationRegions {
            alpha: Region {
                rectangles: vec![(neg_phi, Interval::closed(-120.0, 30.0))],
            },
            beta1: Region {
                rectangles: vec![
                    (neg_phi, Interval::open_closed(30.0, 180.0)),
                    (neg_phi, Interval::closed(-180.0, -150.0)),
                ],
            },
            beta2: Region {
                rectangles: vec![(Interval::open_closed(0.0, 180.0), Interval::closed(-180.0, 180.0))],
            },
        }
    }
}

impl ConformationRegions {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.overlaps(&self.beta1) || self.alpha.overlaps(&self.beta2) || self.beta1.overlaps(&self.beta2) {
            return Err(Error::invalid("conformation regions overlap"));
        }
        Ok(())
    }
}

pub fn classify_conformation(phi: f64, psi: f64, regions: &ConformationRegions) -> ConformationLabel {
    if regions.alpha.contains(phi, psi) {
        ConformationLabel::Alpha
    } else if regions.beta1.contains(phi, psi) {
        ConformationLabel::Beta1
    } else if regions.beta2.contains(phi, psi) {
        ConformationLabel::Beta2
    } else {
        ConformationLabel::Unclassified
    }
}

/// `[min − pad·span, max + pad·span]`; a zero span is widened to `±0.5`.
pub fn padded_range(values: &[f64], pad: f64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("observable value".into()));
    }
    let span = hi - lo;
    if span == 0.0 {
        return Ok((lo - 0.5, hi + 0.5));
    }
    Ok((lo - pad * span, hi + pad * span))
}

pub fn rg_histogram(values: &[f64], bins: usize) -> Result<Histogram1D> {
    let (lo, hi) = padded_range(values, DEFAULT_RANGE_PAD)?;
    Histogram1D::from_values(values, lo, hi, bins)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandConfig {
    /// Number of posterior parameter draws `J`.
    pub n_chains: usize,
    pub chain: ChainConfig,
    pub bins: usize,
    pub levels: (f64, f64),
    pub range_pad: f64,
    pub seed: u64,
}

impl Default for BandConfig {
    fn default() -> Self {
        BandConfig {
            n_chains: DEFAULT_BAND_CHAINS,
            chain: ChainConfig::default(),
            bins: DEFAULT_BAND_BINS,
            levels: DEFAULT_LEVELS,
            range_pad: DEFAULT_RANGE_PAD,
            seed: 0,
        }
    }
}

impl BandConfig {
    pub fn validate(&self) -> Result<()> {
        self.chain.validate()?;
        if self.n_chains < 2 {
            return Err(Error::invalid("credible band needs at least 2 posterior draws"));
        }
        let (a, b) = self.levels;
        if !(0.0 < a && a < b && b < 1.0) {
            return Err(Error::invalid("quantile levels must be strictly increasing in (0, 1)"));
        }
        if self.bins == 0 || !(self.range_pad >= 0.0) {
            return Err(Error::invalid("band needs bins ≥ 1 and a non-negative range pad"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredibleBand {
    pub centers: Vec<f64>,
    pub edges: Vec<f64>,
    pub map_curve: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub levels: (f64, f64),
    /// Mean of the observable along the MAP chain.
    pub map_mean: f64,
    /// Quantiles of the per-draw observable means.
    pub mean_lower: f64,
    pub mean_upper: f64,
    pub n_chains: usize,
}

impl CredibleBand {
    pub fn mean_width(&self) -> f64 {
        mean(
            &self
                .upper
                .iter()
                .zip(&self.lower)
                .map(|(u, l)| u - l)
                .collect::<Vec<_>>(),
        )
    }
}

fn chain_observable<F>(
    enc: &EncoderParams,
    dec: &DecoderParams,
    x0: &[f64],
    chain: &ChainConfig,
    seed: u64,
    observable: &F,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = mwg_run(enc, dec, x0, chain, &mut rng)?;
    out.samples.iter().map(|x| observable(x)).collect()
}

/// Credible band of the observable's density.
///
/// Every chain, the MAP chain included, starts at `x0` and uses the same
/// sampler stream (`seed`, stream 0), so the band reflects the spread of the
/// decoder parameters only; draw `j` takes its parameters from stream `j + 1`.
/// The histogram grid is the padded range of the MAP chain's values. Draws are
/// normalized by their total sample count, so mass outside the grid is lost.
pub fn credible_band<F>(
    post: &LaplacePosterior,
    enc: &EncoderParams,
    dec_map: &DecoderParams,
    x0: &[f64],
    observable: F,
    config: &BandConfig,
) -> Result<CredibleBand>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    config.validate()?;
    post.validate()?;
    check_len("Laplace mean", dec_map.mean_net.num_params(), post.mu_l.len())?;

    let map_values = chain_observable(enc, dec_map, x0, &config.chain, config.seed, &observable)?;
    let (lo, hi) = padded_range(&map_values, config.range_pad)?;
    let map_hist = Histogram1D::from_values(&map_values, lo, hi, config.bins)?;

    let draws: Vec<(Vec<f64>, f64)> = (0..config.n_chains)
        .into_par_iter()
        .map(|j| -> Result<(Vec<f64>, f64)> {
            let mut theta_rng = ChaCha8Rng::seed_from_u64(config.seed);
            theta_rng.set_stream(j as u64 + 1);
            let dec = post.sample_decoder(dec_map, &mut theta_rng)?;
            let values = chain_observable(enc, &dec, x0, &config.chain, config.seed, &observable)?;
            let hist = Histogram1D::from_values(&values, lo, hi, config.bins)?;
            Ok((hist.density, mean(&values)))
        })
        .collect::<Result<_>>()?;

    let (a, b) = config.levels;
    let mut lower = Vec::with_capacity(config.bins);
    let mut upper = Vec::with_capacity(config.bins);
    let mut column = vec![0.0; draws.len()];
    for k in 0..config.bins {
        for (c, (d, _)) in column.iter_mut().zip(&draws) {
            *c = d[k];
        }
        column.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&column, a));
        upper.push(quantile_sorted(&column, b));
    }
    let mut means: Vec<f64> = draws.iter().map(|(_, m)| *m).collect();
    means.sort_by(f64::total_cmp);

    Ok(CredibleBand {
        centers: map_hist.centers(),
        edges: map_hist.edges.clone(),
        map_curve: map_hist.density,
        lower,
        upper,
        levels: config.levels,
        map_mean: mean(&map_values),
        mean_lower: quantile_sorted(&means, a),
        mean_upper: quantile_sorted(&means, b),
        n_chains: config.n_chains,
    })
}

pub fn format_histogram1d(h: &Histogram1D) -> String {
    let mut out = String::from("# bin_center\tdensity\n");
    for (c, d) in h.centers().iter().zip(&h.density) {
        let _ = writeln!(out, "{c}\t{d}");
    }
    out
}

pub fn format_histogram2d(h: &Histogram2D) -> String {
    let (nx, ny) = h.shape();
    let mut out = String::from("# phi_center\tpsi_center\tdensity\n");
    for i in 0..nx {
        let xc = 0.5 * (h.x_edges[i] + h.x_edges[i + 1]);
        for j in 0..ny {
            let yc = 0.5 * (h.y_edges[j] + h.y_edges[j + 1]);
            let _ = writeln!(out, "{xc}\t{yc}\t{}", h.density[i * ny + j]);
        }
    }
    out
}

pub fn format_band(band: &CredibleBand) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# levels\t{}\t{}", band.levels.0, band.levels.1);
    let _ = writeln!(
        out,
        "# observable_mean\tmap={}\tlower={}\tupper={}",
        band.map_mean, band.mean_lower, band.mean_upper
    );
    out.push_str("# bin_center\tmap\tlower\tupper\n");
    for k in 0..band.centers.len() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            band.centers[k], band.map_curve[k], band.lower[k], band.upper[k]
        );
    }
    out
}
