use std::io;
use std::path::PathBuf;

/// Everything that can make a subcommand exit nonzero.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },

    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },

    #[error("cannot write CSV {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },

    #[error("invalid JSON in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("unknown preset {name:?}; expected one of: {known}")]
    UnknownPreset { name: String, known: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Model(#[from] contrastive_dynamics::Error),

    #[error("training diverged at step {step}; partial artifacts were written")]
    Diverged { step: u64 },

    #[error("feature normalizer collapsed at step {step}; partial artifacts were written")]
    Collapsed { step: u64 },

    #[error("{failed} of {total} audits did not pass")]
    AuditsFailed { failed: usize, total: usize },
}

impl CliError {
    /// `2` for bad input, `1` for runs and audits that fail.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Read { .. }
            | CliError::Json { .. }
            | CliError::UnknownPreset { .. }
            | CliError::Usage(_) => 2,
            CliError::Model(contrastive_dynamics::Error::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
