use std::path::PathBuf;
use std::process::ExitCode;

use angiovae::inference::DEFAULT_THRESHOLD;
use angiovae::objectives::LossMode;
use angiovae::volume::SliceAxis;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

mod commands;
mod error;
mod manifest;

use error::{CliError, Result};

/// Unsupervised reconstruction and anomaly mapping for TOF-MRA volumes.
///
/// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
/// 3 numerical failure. Log verbosity follows ANGIOVAE_LOG (default "info").
#[derive(Debug, Parser)]
#[command(name = "angiovae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic angiography cohort with vessel and aneurysm masks.
    Phantom(PhantomArgs),
    /// Train a model on every volume in a directory.
    Train(TrainArgs),
    /// Reconstruct a volume, or every volume in a directory, with a trained model.
    Reconstruct(ReconstructArgs),
    /// Compare originals with reconstructions, paired by file name.
    Evaluate(EvaluateArgs),
    /// Local-SSIM anomaly map between an original and its reconstruction.
    Anomaly(AnomalyArgs),
    /// Check analytic gradients of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON phantom spec; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0.0)]
    pub aneurysm_fraction: f64,
    /// Base seed; member i uses seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Volume size as X,Y,Z.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Write uncompressed .nii files.
    #[arg(long)]
    pub no_gzip: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of training volumes (.nii or .nii.gz, top level only).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint, training log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<LossMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patches_per_volume: Option<usize>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    #[arg(long, default_value = "z")]
    pub axis: SliceAxis,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Volume file or directory of volumes.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file, or directory when the input is a directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "z")]
    pub axis: SliceAxis,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub reconstructed: PathBuf,
    /// Output directory for metrics.csv, metrics.json and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "z")]
    pub axis: SliceAxis,
}

#[derive(Debug, Args)]
pub struct AnomalyArgs {
    #[arg(long)]
    pub original: PathBuf,
    /// Precomputed reconstruction of the original.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    pub reconstructed: Option<PathBuf>,
    /// Checkpoint used to reconstruct the original first.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "z")]
    pub axis: SliceAxis,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Add an operation with a deliberately wrong gradient, which must be flagged.
    #[arg(long)]
    pub inject_wrong_gradient: bool,
    /// Directory for gradcheck.json and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

fn run(argv: Vec<String>) -> Result<()> {
    let cli = Cli::try_parse_from(&argv)?;
    let inv = manifest::Invocation::new(argv.into_iter().skip(1).collect());
    match cli.command {
        Command::Phantom(a) => commands::phantom(&a, &inv),
        Command::Train(a) => commands::train(&a, &inv),
        Command::Reconstruct(a) => commands::reconstruct(&a, &inv),
        Command::Evaluate(a) => commands::evaluate(&a, &inv),
        Command::Anomaly(a) => commands::anomaly(&a, &inv),
        Command::Gradcheck(a) => commands::gradcheck(&a, &inv),
        Command::Replay(a) => {
            let m = manifest::RunManifest::read(&a.manifest)?;
            std::env::set_current_dir(&m.working_dir).map_err(|e| {
                CliError::Data(format!("working dir {}: {e}", m.working_dir.display()))
            })?;
            log::info!(
                "replaying `{}` in {}",
                m.args.join(" "),
                m.working_dir.display()
            );
            run(std::iter::once("angiovae".to_string())
                .chain(m.args)
                .collect())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ANGIOVAE_LOG", "info")).init();
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Clap(e)) => {
            let _ = e.print();
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
