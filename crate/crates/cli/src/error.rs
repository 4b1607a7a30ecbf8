use std::path::PathBuf;
use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cvdisc::Error),

    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    /// 2 for I/O and unreadable inputs, 3 for validation, 4 for numerical failure.
    pub fn exit_code(&self) -> ExitCode {
        use cvdisc::Error as E;
        let code = match self {
            CliError::Core(E::Io { .. } | E::Parse { .. } | E::InconsistentFrame { .. }) => 2,
            CliError::Malformed { .. } => 2,
            CliError::Core(E::NonFinite(_) | E::NonFiniteCurvature { .. }) => 4,
            CliError::Core(_) | CliError::Usage(_) => 3,
        };
        ExitCode::from(code)
    }
}
