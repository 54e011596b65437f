use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("constraint component {component} evaluated to a non-finite value")]
    NonFiniteConstraint { component: usize },

    #[error("objective evaluated to a non-finite value")]
    NonFiniteObjective,

    #[error("forward map evaluation failed for particle {particle}: {reason}")]
    Forward { particle: usize, reason: String },

    #[error("particle {particle} diverged with dt = {dt:e}; reduce dt or use the semi-implicit scheme")]
    Divergence { particle: usize, dt: f64 },

    #[error("ensemble became non-finite at iteration {iteration}")]
    EkiDivergence { iteration: u64 },

    #[error("step failed: {reason}; reduce the time step")]
    StepFailure { reason: String },

    #[error("particle {particle} sits at the origin; projection onto the sphere is undefined")]
    ProjectionUndefined { particle: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
