use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cvdisc::data::{
    align_to_reference, generate_synthetic, load_topology, load_trajectory, remove_rigid_body, write_atomic,
    write_trajectory, SyntheticSpec, TrajectoryDataset, TrajectoryFormat,
};
use cvdisc::laplace::laplace_fit;
use cvdisc::observables::{
    backbone_dihedrals, classify_conformation, credible_band, dihedral_of, format_band, format_histogram1d,
    format_histogram2d, radius_of_gyration, ramachandran, rg_histogram, AtomTopology, ConformationRegions,
    DEFAULT_BAND_BINS, RAMACHANDRAN_BINS,
};
use cvdisc::sampler::{ancestral_sample, initial_configuration, mwg_run_seeded};
use cvdisc::trainer::{format_training_log, train};
use cvdisc::vae::{encode, Architecture, DecoderParams, EncoderParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{ModelCheckpoint, TrainingSummary, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{
    EncodeArgs, LaplaceArgs, ObservableKind, ObserveArgs, ReportArgs, ReportObservable, SampleArgs, SampleMode,
    SynthArgs, TrainArgs,
};

// ChaCha streams derived from the user seed; the trainer itself uses stream 0.
const INIT_STREAM: u64 = 1;
const CHAIN_START_STREAM: u64 = 2;

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Refuses to overwrite any input file.
fn ensure_distinct(out: &Path, inputs: &[Option<&PathBuf>]) -> CliResult<()> {
    for input in inputs.iter().flatten() {
        if same_file(out, input) {
            return Err(CliError::usage(format!(
                "output {} would overwrite an input file",
                out.display()
            )));
        }
    }
    Ok(())
}

fn read_dataset(path: &Path, topology: Option<&AtomTopology>) -> CliResult<TrajectoryDataset> {
    let mut ds = load_trajectory(path, TrajectoryFormat::from_path(path))?;
    if let Some(top) = topology {
        if top.n_atoms() != ds.n_atoms() {
            return Err(CliError::usage(format!(
                "topology has {} atoms but {} has {}",
                top.n_atoms(),
                path.display(),
                ds.n_atoms()
            )));
        }
        ds.masses = top.masses.clone();
        ds.labels = top.elements.clone();
    }
    Ok(ds)
}

fn read_topology(path: Option<&PathBuf>) -> CliResult<Option<AtomTopology>> {
    Ok(match path {
        Some(p) => Some(load_topology(p)?),
        None => None,
    })
}

/// Data prepared the way the model saw its training set.
fn model_frames(ckpt: &ModelCheckpoint, path: &Path) -> CliResult<TrajectoryDataset> {
    let mut ds = load_trajectory(path, TrajectoryFormat::from_path(path))?;
    if ds.n_f() != ckpt.architecture.data_dim {
        return Err(CliError::usage(format!(
            "{} has {} coordinates per frame but the model expects {}",
            path.display(),
            ds.n_f(),
            ckpt.architecture.data_dim
        )));
    }
    ds.masses = ckpt.masses.clone();
    ds.labels = ckpt.atom_labels.clone();
    if let Some(reference) = &ckpt.alignment_reference {
        ds = align_to_reference(&ds, reference)?;
    }
    Ok(ds)
}

fn encodings_table(enc: &EncoderParams, ds: &TrajectoryDataset, topology: Option<&AtomTopology>) -> CliResult<String> {
    let d = enc.latent_dim();
    let mut header: Vec<String> = (1..=d).map(|i| format!("z_mean_{i}")).collect();
    header.extend((1..=d).map(|i| format!("z_logvar_{i}")));
    let labelled = topology.filter(|t| !t.residues.is_empty());
    if labelled.is_some() {
        header.push("label".into());
    }
    let regions = ConformationRegions::default();
    let mut out = format!("# {}\n", header.join("\t"));
    for x in &ds.configs {
        let q = encode(enc, x)?;
        let mut row: Vec<String> = q.mu.iter().chain(&q.log_var).map(|v| v.to_string()).collect();
        if let Some(top) = labelled {
            let (phi, psi) = backbone_dihedrals(x, top)?[0];
            row.push(classify_conformation(phi, psi, &regions).as_str().into());
        }
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    Ok(out)
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".log");
    out.with_file_name(name)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let log_path = args.log.clone().unwrap_or_else(|| default_log_path(&args.out));
    for out in [Some(&args.out), Some(&log_path), args.encodings.as_ref()]
        .into_iter()
        .flatten()
    {
        ensure_distinct(out, &[Some(&args.data), args.topology.as_ref(), args.config.as_ref()])?;
    }
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(e) = args.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(m) = args.minibatch {
        cfg.train.minibatch_size = Some(m);
    }
    if let Some(l) = args.mc_samples {
        cfg.train.mc_samples = l;
    }
    if args.no_ard {
        cfg.train.ard = false;
    }
    if args.no_align {
        cfg.align = false;
    }
    if let Some(d) = args.latent_dim {
        cfg.model.latent_dim = d;
    }
    if let Some(h) = &args.hidden {
        cfg.model.hidden = h
            .as_slice()
            .try_into()
            .map_err(|_| CliError::usage("--hidden takes exactly three widths"))?;
    }
    if cfg.model.latent_dim == 0 || cfg.model.hidden.contains(&0) {
        return Err(CliError::usage("latent and hidden dimensions must be positive"));
    }

    let topology = read_topology(args.topology.as_ref())?;
    let mut ds = read_dataset(&args.data, topology.as_ref())?;
    let alignment_reference = if cfg.align {
        ds = remove_rigid_body(&ds, 0)?;
        Some(ds.configs[0].clone())
    } else {
        None
    };

    let seed = cfg.train.seed;
    let arch = Architecture::new(ds.n_f(), cfg.model.latent_dim, cfg.model.hidden);
    let mut init = stream(seed, INIT_STREAM);
    let encoder = EncoderParams::init(&arch, &mut init)?;
    let decoder = DecoderParams::init(&arch, &mut init)?;
    let chain_start = initial_configuration(&ds.configs, &mut stream(seed, CHAIN_START_STREAM))?;

    let report = train(&ds.configs, encoder, decoder, &cfg.train)?;
    let summary = TrainingSummary {
        epochs: report.epochs_run(),
        final_elbo: report.final_elbo().unwrap_or(f64::NAN),
        converged: report.converged,
        sparsity: report.sparsity,
    };
    let ckpt = ModelCheckpoint {
        format_version: FORMAT_VERSION,
        architecture: arch,
        encoder: report.encoder,
        decoder: report.decoder,
        ard: report.ard,
        laplace: None,
        config: cfg,
        seed,
        atom_labels: ds.labels.clone(),
        masses: ds.masses.clone(),
        alignment_reference,
        chain_start,
        summary,
    };
    ckpt.save(&args.out)?;
    write_atomic(&log_path, &format_training_log(&report.epochs))?;
    if let Some(path) = &args.encodings {
        write_atomic(path, &encodings_table(&ckpt.encoder, &ds, topology.as_ref())?)?;
    }
    let s = &ckpt.summary;
    println!(
        "epochs\t{}\nfinal_elbo\t{}\nconverged\t{}\nsparsity\t{}\nwall_clock_secs\t{:.3}",
        s.epochs, s.final_elbo, s.converged, s.sparsity, report.wall_clock_secs
    );
    Ok(())
}

pub fn cmd_encode(args: &EncodeArgs) -> CliResult<()> {
    ensure_distinct(
        &args.out,
        &[Some(&args.model), Some(&args.data), args.topology.as_ref()],
    )?;
    let ckpt = ModelCheckpoint::load(&args.model)?;
    let topology = read_topology(args.topology.as_ref())?;
    if let Some(top) = &topology {
        if top.n_atoms() * 3 != ckpt.architecture.data_dim {
            return Err(CliError::usage("topology atom count does not match the model"));
        }
    }
    let ds = model_frames(&ckpt, &args.data)?;
    write_atomic(&args.out, &encodings_table(&ckpt.encoder, &ds, topology.as_ref())?)?;
    Ok(())
}

fn chain_start(ckpt: &ModelCheckpoint, data: Option<&PathBuf>, seed: u64) -> CliResult<Vec<f64>> {
    match data {
        Some(path) => {
            let ds = model_frames(ckpt, path)?;
            Ok(initial_configuration(
                &ds.configs,
                &mut stream(seed, CHAIN_START_STREAM),
            )?)
        }
        None => Ok(ckpt.chain_start.clone()),
    }
}

pub fn cmd_sample(args: &SampleArgs) -> CliResult<()> {
    ensure_distinct(&args.out, &[Some(&args.model), args.data.as_ref()])?;
    let ckpt = ModelCheckpoint::load(&args.model)?;
    let mut chain = ckpt.config.sampler;
    if let Some(t) = args.steps {
        chain.steps = t;
    }
    if let Some(b) = args.burn_in {
        chain.burn_in = b;
    }
    if let Some(t) = args.thin {
        chain.thin = t;
    }
    let samples = match args.mode {
        SampleMode::Ancestral => {
            if chain.steps == 0 {
                return Err(CliError::usage("-T must be at least 1"));
            }
            ancestral_sample(&ckpt.decoder, &mut ChaCha8Rng::seed_from_u64(args.seed), chain.steps)?
        }
        SampleMode::Mwg => {
            let x0 = chain_start(&ckpt, args.data.as_ref(), args.seed)?;
            let out = mwg_run_seeded(&ckpt.encoder, &ckpt.decoder, &x0, &chain, args.seed)?;
            println!("acceptance_rate\t{}", out.acceptance_rate);
            out.samples
        }
    };
    if samples.is_empty() {
        return Err(CliError::usage("the chain settings keep no samples"));
    }
    let ds = TrajectoryDataset::new(samples, ckpt.masses.clone(), ckpt.atom_labels.clone())?;
    write_trajectory(&args.out, &ds, TrajectoryFormat::from_path(&args.out))?;
    println!("frames\t{}", ds.len());
    Ok(())
}

pub fn cmd_laplace(args: &LaplaceArgs) -> CliResult<()> {
    ensure_distinct(&args.out, &[Some(&args.model), Some(&args.data)])?;
    let mut ckpt = ModelCheckpoint::load(&args.model)?;
    if let Some(h) = args.fd_step {
        ckpt.config.laplace.fd_step = h;
    }
    if let Some(l) = args.mc_samples {
        ckpt.config.laplace.mc_samples = l;
    }
    if let Some(s) = args.seed {
        ckpt.config.laplace.seed = s;
    }
    let ds = model_frames(&ckpt, &args.data)?;
    let lc = &ckpt.config.laplace;
    let post = laplace_fit(
        &ckpt.decoder,
        &ckpt.encoder,
        &ds.configs,
        ckpt.ard.as_ref(),
        lc.fd_step,
        lc.mc_samples,
        lc.seed,
    )?;
    let mean_var = post.sigma_l_sq.iter().sum::<f64>() / post.sigma_l_sq.len() as f64;
    println!(
        "parameters\t{}\nfloored\t{}\nmean_variance\t{mean_var}",
        post.mu_l.len(),
        post.floored
    );
    ckpt.laplace = Some(post);
    ckpt.save(&args.out)
}

pub fn cmd_observe(args: &ObserveArgs) -> CliResult<()> {
    ensure_distinct(&args.out, &[Some(&args.trajectory), args.topology.as_ref()])?;
    let topology = read_topology(args.topology.as_ref())?;
    let ds = read_dataset(&args.trajectory, topology.as_ref())?;
    let text = match args.observable {
        ObservableKind::Rg => {
            let values = ds
                .configs
                .iter()
                .map(|x| radius_of_gyration(x, &ds.masses))
                .collect::<cvdisc::Result<Vec<_>>>()?;
            if args.per_frame {
                let mut out = String::from("# frame\trg\n");
                for (i, v) in values.iter().enumerate() {
                    let _ = writeln!(out, "{i}\t{v}");
                }
                out
            } else {
                format_histogram1d(&rg_histogram(&values, args.bins.unwrap_or(DEFAULT_BAND_BINS))?)
            }
        }
        ObservableKind::Ramachandran => {
            let top = topology
                .as_ref()
                .ok_or_else(|| CliError::usage("--observable ramachandran needs --topology"))?;
            if args.per_frame {
                let regions = ConformationRegions::default();
                let mut out = String::from("# frame\tresidue\tphi\tpsi\tlabel\n");
                for (i, x) in ds.configs.iter().enumerate() {
                    for (r, (phi, psi)) in backbone_dihedrals(x, top)?.into_iter().enumerate() {
                        let label = classify_conformation(phi, psi, &regions);
                        let _ = writeln!(out, "{i}\t{r}\t{phi}\t{psi}\t{}", label.as_str());
                    }
                }
                out
            } else {
                let rama = ramachandran(&ds.configs, top, args.bins.unwrap_or(RAMACHANDRAN_BINS))?;
                format_histogram2d(&rama.pooled)
            }
        }
    };
    write_atomic(&args.out, &text)?;
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    ensure_distinct(
        &args.out,
        &[Some(&args.model), args.data.as_ref(), args.topology.as_ref()],
    )?;
    let ckpt = ModelCheckpoint::load(&args.model)?;
    let post = ckpt
        .laplace
        .as_ref()
        .ok_or_else(|| CliError::usage("the model has no Laplace posterior; run `cvdisc laplace` first"))?;
    let mut band = ckpt.config.band;
    if let Some(j) = args.chains {
        band.n_chains = j;
    }
    if let Some(levels) = &args.levels {
        match levels.as_slice() {
            [a, b] => band.levels = (*a, *b),
            _ => return Err(CliError::usage("--levels takes two comma-separated quantile levels")),
        }
    }
    if let Some(t) = args.steps {
        band.chain.steps = t;
    }
    if let Some(b) = args.bins {
        band.bins = b;
    }
    if let Some(s) = args.seed {
        band.seed = s;
    }
    let x0 = chain_start(&ckpt, args.data.as_ref(), band.seed)?;

    let result = match args.observable {
        ReportObservable::Rg => {
            let masses = ckpt.masses.clone();
            credible_band(
                post,
                &ckpt.encoder,
                &ckpt.decoder,
                &x0,
                |x| radius_of_gyration(x, &masses),
                &band,
            )?
        }
        ReportObservable::Phi | ReportObservable::Psi => {
            let top = read_topology(args.topology.as_ref())?
                .ok_or_else(|| CliError::usage("dihedral observables need --topology"))?;
            if top.n_atoms() * 3 != ckpt.architecture.data_dim {
                return Err(CliError::usage("topology atom count does not match the model"));
            }
            let residue = *top
                .residues
                .get(args.residue)
                .ok_or_else(|| CliError::usage(format!("topology has no residue {}", args.residue)))?;
            let idx = if args.observable == ReportObservable::Phi {
                residue.phi
            } else {
                residue.psi
            };
            credible_band(post, &ckpt.encoder, &ckpt.decoder, &x0, |x| dihedral_of(x, idx), &band)?
        }
    };
    let mut text = format!(
        "# observable\t{}\n# chains\t{}\n# steps\t{}\n# seed\t{}\n",
        args.observable.name(),
        band.n_chains,
        band.chain.steps,
        band.seed
    );
    text.push_str(&format_band(&result));
    write_atomic(&args.out, &text)?;
    println!(
        "mean_width\t{}\nobservable_mean\t{}\t[{}, {}]",
        result.mean_width(),
        result.map_mean,
        result.mean_lower,
        result.mean_upper
    );
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let mut spec = SyntheticSpec::two_mode(args.atoms, args.seed);
    if let Some(noise) = args.noise {
        spec.noise = noise;
    }
    let out = generate_synthetic(&spec, args.samples)?;
    write_trajectory(&args.out, &out.dataset, TrajectoryFormat::from_path(&args.out))?;
    if let Some(path) = &args.truth {
        let mut text = String::from("# mode\tz_1\tz_2\n");
        for (m, z) in out.modes.iter().zip(&out.latents) {
            let _ = writeln!(text, "{m}\t{}\t{}", z[0], z[1]);
        }
        write_atomic(path, &text)?;
    }
    Ok(())
}
