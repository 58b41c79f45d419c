use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: refusing to overwrite an existing file (pass --force)")]
    Exists { path: PathBuf },
    #[error("construction infeasible: {0}")]
    Infeasible(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(icreg_core::Error),
}

impl From<icreg_core::Error> for CliError {
    fn from(e: icreg_core::Error) -> Self {
        match e {
            icreg_core::Error::Infeasible(msg) => CliError::Infeasible(msg),
            icreg_core::Error::InvalidSpec(msg) => CliError::Config(msg),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    /// 2 for configuration problems, 3 for infeasible constructions, 4 for
    /// failed `--check` thresholds, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Exists { .. } => 2,
            CliError::Infeasible(_) => 3,
            CliError::CheckFailed(_) => 4,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
