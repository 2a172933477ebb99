//! Command-line front end: configuration, experiment drivers and output files.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;

pub mod commands;
pub mod config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] asapp_core::Error),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    /// 2 for bad input (arguments, files, parse errors), 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } => 2,
            CliError::Core(asapp_core::Error::Parse { .. } | asapp_core::Error::Io(_)) => 2,
            CliError::Core(_) | CliError::CheckFailed(_) => 1,
        }
    }
}
