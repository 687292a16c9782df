//! Command-line front end for competing-risks joint models: simulation,
//! fitting from a TOML configuration, and a recovery check.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod pool;
pub mod report;

use std::path::{Path, PathBuf};

/// Errors of the command layer. Numerical failures exit with 1, usage and
/// I/O errors with 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] cmprsk_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Model(e) if is_numerical(e) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn input(path: &Path, message: impl Into<String>) -> Self {
        CliError::Input {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

fn is_numerical(e: &cmprsk_core::Error) -> bool {
    use cmprsk_core::Error;
    match e {
        Error::Stage { source, .. } => is_numerical(source),
        Error::Validation(_) | Error::Spec(_) => false,
        _ => true,
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
