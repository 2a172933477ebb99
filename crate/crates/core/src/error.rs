use thiserror::Error;

use crate::graph::PoseId;

/// Errors produced by the optimization library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or dimensions of inputs do not agree.
    #[error("structural error: {0}")]
    Structural(String),

    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A neighbor pose was required but never entered the cache.
    #[error("cache of robot {robot} has no value for neighbor pose {pose}")]
    Staleness { robot: usize, pose: PoseId },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    /// The pose graph splits into several weakly connected components.
    #[error("pose graph is disconnected into {count} components (first pose of each: {representatives:?})")]
    Disconnected { count: usize, representatives: Vec<PoseId> },

    #[error("run diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
