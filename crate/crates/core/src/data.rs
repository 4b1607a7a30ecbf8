//! Trajectory files, rigid-body-motion removal, splitting and synthetic data.
//!
//! Coordinates are nanometers, masses unified atomic mass units. Each frame is
//! stored flattened as `[x1, y1, z1, x2, ...]`.
//!
//! File formats:
//! - XYZ: repeated blocks of an atom-count line, a comment line and one
//!   `element x y z` line per atom. A `temperature=<K>` token in the first
//!   comment line is read as metadata.
//! - CSV: a header `x1,...,x{n_f}` followed by one frame per row.
//! - Topology: `index element mass` lines followed by
//!   `dihedral phi|psi i j k l` lines; `#` starts a comment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::observables::{AtomTopology, ResidueDihedrals};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub configs: Vec<Vec<f64>>,
    pub masses: Vec<f64>,
    pub labels: Vec<String>,
    pub temperature: Option<f64>,
}

impl TrajectoryDataset {
    pub fn new(configs: Vec<Vec<f64>>, masses: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        let ds = TrajectoryDataset {
            configs,
            masses,
            labels,
            temperature: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Unit masses and `X` labels for `n_f / 3` atoms.
    pub fn from_configs(configs: Vec<Vec<f64>>) -> Result<Self> {
        let n_f = configs.first().map(|c| c.len()).unwrap_or(0);
        let p = n_f / 3;
        Self::new(configs, vec![1.0; p], vec!["X".to_string(); p])
    }

    pub fn validate(&self) -> Result<()> {
        if self.configs.is_empty() {
            return Err(Error::invalid("dataset must contain at least one configuration"));
        }
        let n_f = self.configs[0].len();
        if n_f == 0 || !n_f.is_multiple_of(3) {
            return Err(Error::invalid(format!(
                "configuration length {n_f} is not a positive multiple of 3"
            )));
        }
        check_len("atom masses", n_f / 3, self.masses.len())?;
        check_len("atom labels", n_f / 3, self.labels.len())?;
        for c in &self.configs {
            check_len("configuration length", n_f, c.len())?;
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("coordinate".into()));
            }
        }
        if self.masses.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::invalid("atom masses must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn n_f(&self) -> usize {
        self.configs[0].len()
    }

    pub fn n_atoms(&self) -> usize {
        self.n_f() / 3
    }

    pub fn subset(&self, indices: &[usize]) -> TrajectoryDataset {
        TrajectoryDataset {
            configs: indices.iter().map(|&i| self.configs[i].clone()).collect(),
            masses: self.masses.clone(),
            labels: self.labels.clone(),
            temperature: self.temperature,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryFormat {
    Xyz,
    Csv,
}

impl TrajectoryFormat {
    /// `.csv` selects CSV; anything else is read as XYZ.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => TrajectoryFormat::Csv,
            _ => TrajectoryFormat::Xyz,
        }
    }
}

pub fn element_mass(symbol: &str) -> Option<f64> {
    Some(match symbol {
        "H" => 1.008,
        "C" => 12.011,
        "N" => 14.007,
        "O" => 15.999,
        "S" => 32.06,
        "P" => 30.974,
        "X" => 1.0,
        _ => return None,
    })
}

pub fn load_trajectory(path: &Path, format: TrajectoryFormat) -> Result<TrajectoryDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        TrajectoryFormat::Xyz => parse_xyz(&text, path),
        TrajectoryFormat::Csv => parse_csv(&text, path),
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_coord(tok: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = tok
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid number `{tok}`")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite coordinate `{tok}`")));
    }
    Ok(v)
}

pub fn parse_xyz(text: &str, path: &Path) -> Result<TrajectoryDataset> {
    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0;
    let mut configs = Vec::new();
    let mut labels: Option<Vec<String>> = None;
    let mut temperature = None;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let frame = configs.len();
        let count: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, i + 1, "expected atom count"))?;
        if count == 0 {
            return Err(parse_err(path, i + 1, "frame has no atoms"));
        }
        let comment = lines
            .get(i + 1)
            .ok_or_else(|| parse_err(path, i + 2, "missing comment line"))?;
        if frame == 0 {
            for tok in comment.split_whitespace() {
                if let Some(v) = tok.strip_prefix("temperature=") {
                    temperature = Some(parse_coord(v, path, i + 2)?);
                }
            }
        }
        let mut frame_labels = Vec::with_capacity(count);
        let mut coords = Vec::with_capacity(3 * count);
        for a in 0..count {
            let ln = i + 2 + a;
            let line = lines
                .get(ln)
                .ok_or_else(|| parse_err(path, ln + 1, "unexpected end of frame"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 4 {
                return Err(parse_err(path, ln + 1, "expected `element x y z`"));
            }
            frame_labels.push(toks[0].to_string());
            for t in &toks[1..] {
                coords.push(parse_coord(t, path, ln + 1)?);
            }
        }
        match &labels {
            None => labels = Some(frame_labels),
            Some(first) if *first != frame_labels => {
                return Err(Error::InconsistentFrame {
                    path: path.to_path_buf(),
                    frame,
                    message: if first.len() != frame_labels.len() {
                        format!("{} atoms, first frame has {}", frame_labels.len(), first.len())
                    } else {
                        "atom ordering differs from the first frame".into()
                    },
                });
            }
            Some(_) => {}
        }
        configs.push(coords);
        i += 2 + count;
    }
    let labels = labels.ok_or_else(|| parse_err(path, 1, "no frames"))?;
    let masses = labels
        .iter()
        .map(|l| element_mass(l).ok_or_else(|| parse_err(path, 3, format!("unknown element `{l}`"))))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = TrajectoryDataset::new(configs, masses, labels)?;
    ds.temperature = temperature;
    Ok(ds)
}

pub fn parse_csv(text: &str, path: &Path) -> Result<TrajectoryDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    for (k, c) in cols.iter().enumerate() {
        if *c != format!("x{}", k + 1) {
            return Err(parse_err(
                path,
                1,
                format!("header column {} should be `x{}`", k + 1, k + 1),
            ));
        }
    }
    let mut configs = Vec::new();
    for (ln, line) in lines {
        let row = line
            .split(',')
            .map(|t| parse_coord(t, path, ln + 1))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != cols.len() {
            return Err(parse_err(
                path,
                ln + 1,
                format!("expected {} values, found {}", cols.len(), row.len()),
            ));
        }
        configs.push(row);
    }
    if configs.is_empty() {
        return Err(parse_err(path, 2, "no frames"));
    }
    TrajectoryDataset::from_configs(configs)
}

pub fn format_xyz(ds: &TrajectoryDataset) -> String {
    let mut out = String::new();
    for (f, c) in ds.configs.iter().enumerate() {
        let _ = writeln!(out, "{}", ds.n_atoms());
        match ds.temperature {
            Some(t) => {
                let _ = writeln!(out, "frame={f} temperature={t}");
            }
            None => {
                let _ = writeln!(out, "frame={f}");
            }
        }
        for (label, p) in ds.labels.iter().zip(c.chunks_exact(3)) {
            let _ = writeln!(out, "{label} {} {} {}", p[0], p[1], p[2]);
        }
    }
    out
}

pub fn format_csv(ds: &TrajectoryDataset) -> String {
    let header: Vec<String> = (1..=ds.n_f()).map(|k| format!("x{k}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for c in &ds.configs {
        let row: Vec<String> = c.iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_trajectory(path: &Path, ds: &TrajectoryDataset, format: TrajectoryFormat) -> Result<()> {
    let text = match format {
        TrajectoryFormat::Xyz => format_xyz(ds),
        TrajectoryFormat::Csv => format_csv(ds),
    };
    write_atomic(path, &text)
}

fn points(x: &[f64]) -> impl Iterator<Item = Vector3<f64>> + '_ {
    x.chunks_exact(3).map(|p| Vector3::new(p[0], p[1], p[2]))
}

/// Accumulated relative to the first atom, so a lone atom is its own
/// centre exactly.
pub fn center_of_mass(x: &[f64], masses: &[f64]) -> Vector3<f64> {
    let Some(origin) = points(x).next() else {
        return Vector3::zeros();
    };
    let total: f64 = masses.iter().sum();
    origin
        + points(x)
            .zip(masses)
            .fold(Vector3::zeros(), |acc, (p, m)| acc + (p - origin) * *m)
            / total
}

fn centered(x: &[f64], masses: &[f64]) -> Vec<Vector3<f64>> {
    let com = center_of_mass(x, masses);
    points(x).map(|p| p - com).collect()
}

/// Mass-weighted root-mean-square deviation without any fitting.
pub fn rmsd(a: &[f64], b: &[f64], masses: &[f64]) -> f64 {
    let total: f64 = masses.iter().sum();
    let ss: f64 = points(a)
        .zip(points(b))
        .zip(masses)
        .map(|((p, q), m)| m * (p - q).norm_squared())
        .sum();
    (ss / total).sqrt()
}

/// Rotation `R` minimizing `Σ m_p ‖R y_p − x_p‖²` for centered point sets.
pub fn kabsch_rotation(mobile: &[Vector3<f64>], reference: &[Vector3<f64>], masses: &[f64]) -> Matrix3<f64> {
    let h = mobile
        .iter()
        .zip(reference)
        .zip(masses)
        .fold(Matrix3::zeros(), |acc, ((y, x), m)| acc + (y * x.transpose()) * *m);
    let svd = h.svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let d = (v * u.transpose()).determinant().signum();
    v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose()
}

/// Centers every frame on its mass-weighted centroid and rotates it onto the
/// centered reference frame by mass-weighted least-squares superposition.
pub fn remove_rigid_body(ds: &TrajectoryDataset, reference_index: usize) -> Result<TrajectoryDataset> {
    ds.validate()?;
    if reference_index >= ds.len() {
        return Err(Error::invalid(format!(
            "reference frame {reference_index} out of range for {} frames",
            ds.len()
        )));
    }
    align_to_reference(ds, &ds.configs[reference_index])
}

/// [`remove_rigid_body`] against an external reference frame, e.g. one stored
/// with a trained model.
pub fn align_to_reference(ds: &TrajectoryDataset, reference: &[f64]) -> Result<TrajectoryDataset> {
    ds.validate()?;
    check_len("reference frame", ds.n_f(), reference.len())?;
    let masses = &ds.masses;
    let reference = centered(reference, masses);
    let spread = reference
        .iter()
        .zip(masses)
        .fold(Matrix3::zeros(), |acc, (p, m)| acc + (p * p.transpose()) * *m);
    let mut eig = SymmetricEigen::new(spread).eigenvalues.as_slice().to_vec();
    eig.sort_by(|a, b| b.total_cmp(a));
    if !(eig[0] > 0.0) || eig[1] <= 1e-12 * eig[0] {
        return Err(Error::DegenerateGeometry(
            "reference frame is collinear; its rotation is undetermined".into(),
        ));
    }
    let configs = ds
        .configs
        .iter()
        .map(|x| {
            let mobile = centered(x, masses);
            let r = kabsch_rotation(&mobile, &reference, masses);
            mobile
                .iter()
                .flat_map(|p| {
                    let q = r * p;
                    [q.x, q.y, q.z]
                })
                .collect()
        })
        .collect();
    Ok(TrajectoryDataset { configs, ..ds.clone() })
}

/// Disjoint uniform split into `n_train` training and `N − n_train` test frames.
pub fn split(ds: &TrajectoryDataset, n_train: usize, seed: u64) -> Result<(TrajectoryDataset, TrajectoryDataset)> {
    if n_train == 0 || n_train >= ds.len() {
        return Err(Error::invalid(format!(
            "n_train must be in 1..{}, got {n_train}",
            ds.len()
        )));
    }
    let (train, test) = split_indices(ds.len(), n_train, seed);
    Ok((ds.subset(&train), ds.subset(&test)))
}

pub fn split_indices(n: usize, n_train: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let test = idx.split_off(n_train);
    (idx, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMode {
    pub center: Vec<f64>,
    pub weight: f64,
    /// Standard deviation of the latent draws around `center`.
    pub spread: f64,
}

/// Latent mixture pushed through a fixed random map
/// `g(z) = scale · A₂ tanh(A₁ z + c₁) + c₂` plus isotropic noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub latent_dim: usize,
    pub modes: Vec<SyntheticMode>,
    pub n_atoms: usize,
    pub hidden_width: usize,
    pub map_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: TrajectoryDataset,
    pub latents: Vec<Vec<f64>>,
    pub modes: Vec<usize>,
}

impl SyntheticSpec {
    /// Two equally weighted, well separated modes in a 2-D latent space.
    pub fn two_mode(n_atoms: usize, seed: u64) -> Self {
        SyntheticSpec {
            latent_dim: 2,
            modes: vec![
                SyntheticMode {
                    center: vec![-1.5, 0.0],
                    weight: 0.5,
                    spread: 0.3,
                },
                SyntheticMode {
                    center: vec![1.5, 0.0],
                    weight: 0.5,
                    spread: 0.3,
                },
            ],
            n_atoms,
            hidden_width: 8,
            map_scale: 1.0,
            noise: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.n_atoms == 0 || self.latent_dim == 0 || self.hidden_width == 0 {
            return Err(Error::invalid(
                "synthetic spec needs modes, atoms, latent and hidden dims",
            ));
        }
        let total: f64 = self.modes.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.modes.iter().any(|m| m.weight < 0.0) {
            return Err(Error::invalid("mode weights must be non-negative and sum to 1"));
        }
        for m in &self.modes {
            check_len("mode center", self.latent_dim, m.center.len())?;
        }
        if !(self.noise > 0.0) {
            return Err(Error::invalid("noise scale must be positive"));
        }
        Ok(())
    }
}

struct ObservationMap {
    a1: Vec<f64>,
    c1: Vec<f64>,
    a2: Vec<f64>,
    c2: Vec<f64>,
    hidden: usize,
    scale: f64,
}

impl ObservationMap {
    fn draw<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Self {
        let d = spec.latent_dim;
        let h = spec.hidden_width;
        let n_f = 3 * spec.n_atoms;
        let mut normal =
            |n: usize, sd: f64| -> Vec<f64> { (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect() };
        ObservationMap {
            a1: normal(h * d, 1.0),
            c1: normal(h, 0.5),
            a2: normal(n_f * h, 1.0 / (h as f64).sqrt()),
            c2: normal(n_f, 1.0),
            hidden: h,
            scale: spec.map_scale,
        }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|k| {
                let s: f64 = (0..d).map(|i| self.a1[k * d + i] * z[i]).sum();
                (s + self.c1[k]).tanh()
            })
            .collect();
        self.c2
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let s: f64 = hidden
                    .iter()
                    .enumerate()
                    .map(|(k, hk)| self.a2[j * self.hidden + k] * hk)
                    .sum();
                c + self.scale * s
            })
            .collect()
    }
}

/// The map is drawn first from the `seed` stream, then the `n` samples.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<SyntheticData> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("synthetic sample count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let map = ObservationMap::draw(spec, &mut rng);
    let mut configs = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    let mut modes = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = spec.modes.len() - 1;
        for (i, m) in spec.modes.iter().enumerate() {
            acc += m.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        let mode = &spec.modes[k];
        let z: Vec<f64> = mode
            .center
            .iter()
            .map(|c| c + mode.spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let x: Vec<f64> = map
            .apply(&z)
            .into_iter()
            .map(|v| v + spec.noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        configs.push(x);
        latents.push(z);
        modes.push(k);
    }
    let mass = element_mass("C").expect("carbon is tabulated");
    let dataset = TrajectoryDataset::new(configs, vec![mass; spec.n_atoms], vec!["C".to_string(); spec.n_atoms])?;
    Ok(SyntheticData {
        dataset,
        latents,
        modes,
    })
}

pub fn load_topology(path: &Path) -> Result<AtomTopology> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_topology(&text, path)
}

pub fn parse_topology(text: &str, path: &Path) -> Result<AtomTopology> {
    let mut elements = Vec::new();
    let mut masses = Vec::new();
    let mut phis: Vec<[usize; 4]> = Vec::new();
    let mut psis: Vec<[usize; 4]> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks[0] == "dihedral" {
            if toks.len() != 6 {
                return Err(parse_err(path, ln + 1, "expected `dihedral phi|psi i j k l`"));
            }
            let mut idx = [0usize; 4];
            for (slot, t) in idx.iter_mut().zip(&toks[2..]) {
                *slot = t
                    .parse()
                    .map_err(|_| parse_err(path, ln + 1, format!("invalid atom index `{t}`")))?;
            }
            match toks[1] {
                "phi" => phis.push(idx),
                "psi" => psis.push(idx),
                other => return Err(parse_err(path, ln + 1, format!("unknown dihedral kind `{other}`"))),
            }
        } else {
            if toks.len() != 3 {
                return Err(parse_err(path, ln + 1, "expected `index element mass`"));
            }
            let index: usize = toks[0]
                .parse()
                .map_err(|_| parse_err(path, ln + 1, "invalid atom index"))?;
            if index != elements.len() {
                return Err(parse_err(
                    path,
                    ln + 1,
                    format!("atom index {index} out of sequence, expected {}", elements.len()),
                ));
            }
            let mass: f64 = toks[2].parse().map_err(|_| parse_err(path, ln + 1, "invalid mass"))?;
            elements.push(toks[1].to_string());
            masses.push(mass);
        }
    }
    if phis.len() != psis.len() {
        return Err(parse_err(
            path,
            text.lines().count(),
            format!("{} phi but {} psi dihedrals", phis.len(), psis.len()),
        ));
    }
    let residues = phis
        .into_iter()
        .zip(psis)
        .map(|(phi, psi)| ResidueDihedrals { phi, psi })
        .collect();
    AtomTopology::new(elements, masses, residues)
}

pub fn format_topology(top: &AtomTopology) -> String {
    let mut out = String::new();
    for (i, (e, m)) in top.elements.iter().zip(&top.masses).enumerate() {
        let _ = writeln!(out, "{i} {e} {m}");
    }
    for r in &top.residues {
        let [a, b, c, d] = r.phi;
        let _ = writeln!(out, "dihedral phi {a} {b} {c} {d}");
        let [a, b, c, d] = r.psi;
        let _ = writeln!(out, "dihedral psi {a} {b} {c} {d}");
    }
    out
}
