use std::path::PathBuf;

use thiserror::Error;

/// Failures of the batch front end. Each variant maps to a distinct exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("cli::{op}: {path}: {source}")]
    Io {
        op: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cli::load_config: {path}: {reason}")]
    Config { path: PathBuf, reason: String },

    #[error("cli::{op}: invalid configuration: {reason}")]
    Invalid { op: &'static str, reason: String },

    #[error("cli::ingest: {}{reason}", row.map(|r| format!("row {r}: ")).unwrap_or_default())]
    Ingest { row: Option<u64>, reason: String },

    #[error("cli::{op}: response and cause are both `{series}`")]
    DegenerateInput { op: &'static str, series: String },

    #[error(transparent)]
    Core(#[from] ftsgc_core::Error),

    #[error("cli::{op}: {reason}")]
    Output { op: &'static str, reason: String },
}

impl CliError {
    /// 1 for I/O and output failures, 2 for configuration, 3 for input data,
    /// 4 for estimation errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Output { .. } => 1,
            CliError::Config { .. } | CliError::Invalid { .. } => 2,
            CliError::Ingest { .. } | CliError::DegenerateInput { .. } => 3,
            CliError::Core(_) => 4,
        }
    }

    pub(crate) fn io(op: &'static str, path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            op,
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingest(row: Option<u64>, reason: impl Into<String>) -> Self {
        CliError::Ingest {
            row,
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        CliError::Invalid {
            op,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
