use angiovae::checkpoint::CheckpointError;
use angiovae::evaluate::EvalError;
use angiovae::inference::InferenceError;
use angiovae::model::ModelError;
use angiovae::nifti::NiftiError;
use angiovae::phantom::PhantomError;
use angiovae::preprocess::PreprocessError;
use angiovae::train::TrainError;
use angiovae::volume::VolumeError;
use angiovae::TensorError;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    #[error("{0}")]
    Usage(String),
    /// Unreadable, malformed or mismatched input (exit 2).
    #[error("{0}")]
    Data(String),
    /// Numerical failure: divergence, non-finite gradients, failed gradient check (exit 3).
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Clap(#[from] clap::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Clap(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error!(
    std::io::Error,
    NiftiError,
    CheckpointError,
    PreprocessError,
    EvalError,
    InferenceError,
    VolumeError,
    ModelError
);

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteGradient { .. } | TrainError::Diverged { .. } => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
