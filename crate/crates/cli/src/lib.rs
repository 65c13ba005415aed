//! Configuration, output tree and experiment dispatch behind the `ktl`
//! binary.

use std::path::Path;

pub mod config;
pub mod manifest;
pub mod run;

pub use config::RunConfig;
pub use manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Schema(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Integrity(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}
