//! `cvdisc`: train, sample and analyse Bayesian VAE collective-variable models.

mod checkpoint;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "cvdisc",
    version,
    about = "Collective-variable discovery with a Bayesian VAE"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a VAE to a trajectory and write a checkpoint.
    Train(TrainArgs),
    /// Write encoder means and log-variances for every frame.
    Encode(EncodeArgs),
    /// Draw configurations from a trained model.
    Sample(SampleArgs),
    /// Add a diagonal Laplace posterior over decoder weights to a checkpoint.
    Laplace(LaplaceArgs),
    /// Histogram an observable over a trajectory.
    Observe(ObserveArgs),
    /// Credible band of an observable under the decoder-weight posterior.
    Report(ReportArgs),
    /// Generate a synthetic two-mode trajectory.
    Synth(SynthArgs),
    /// Print the default run configuration as TOML.
    Defaults,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training trajectory (.xyz or .csv).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Atom topology; supplies masses and lets --encodings carry conformation labels.
    #[arg(long)]
    pub topology: Option<PathBuf>,
    /// Per-epoch log. Defaults to `<out>.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also write encodings of the training frames.
    #[arg(long)]
    pub encodings: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub minibatch: Option<usize>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Three hidden widths, e.g. 128,256,256.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Train without the ARD prior.
    #[arg(long)]
    pub no_ard: bool,
    /// Skip rigid-body alignment.
    #[arg(long)]
    pub no_align: bool,
}

#[derive(Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Adds a conformation label from the first residue's backbone dihedrals.
    #[arg(long)]
    pub topology: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleMode {
    Ancestral,
    Mwg,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "mwg")]
    pub mode: SampleMode,
    /// Chain length (MwG) or number of draws (ancestral).
    #[arg(short = 'T', long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Start the chain from a frame of this trajectory instead of the stored start.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args)]
pub struct LaplaceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write; must differ from --model.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub fd_step: Option<f64>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObservableKind {
    Rg,
    Ramachandran,
}

#[derive(Args)]
pub struct ObserveArgs {
    #[arg(long)]
    pub trajectory: PathBuf,
    #[arg(long, value_enum)]
    pub observable: ObservableKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub topology: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Write per-frame values instead of a histogram.
    #[arg(long)]
    pub per_frame: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportObservable {
    Rg,
    Phi,
    Psi,
}

impl ReportObservable {
    pub fn name(self) -> &'static str {
        match self {
            ReportObservable::Rg => "rg",
            ReportObservable::Phi => "phi",
            ReportObservable::Psi => "psi",
        }
    }
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub observable: ReportObservable,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of posterior decoder draws.
    #[arg(short = 'J', long)]
    pub chains: Option<usize>,
    /// Lower and upper quantile levels, e.g. 0.05,0.95.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    /// Steps per chain.
    #[arg(short = 'T', long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub topology: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub residue: usize,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub atoms: usize,
    #[arg(short = 'n', long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Also write the generating mode and latent of every frame.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("CVDISC_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::usage(format!("CVDISC_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Train(a) => commands::cmd_train(a),
        Command::Encode(a) => commands::cmd_encode(a),
        Command::Sample(a) => commands::cmd_sample(a),
        Command::Laplace(a) => commands::cmd_laplace(a),
        Command::Observe(a) => commands::cmd_observe(a),
        Command::Report(a) => commands::cmd_report(a),
        Command::Synth(a) => commands::cmd_synth(a),
        Command::Defaults => {
            print!("{}", config::RunConfig::default().to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
