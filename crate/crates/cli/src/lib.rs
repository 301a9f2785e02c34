//! Configuration loading, experiment commands and result export for the
//! `platoon` command-line tool.

use std::path::PathBuf;

pub mod commands;
pub mod config;
pub mod export;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("configuration parse error: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] platoon_core::Error),
}
