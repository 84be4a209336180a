use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DarcError {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("running statistics are frozen outside training")]
    FrozenBuffer,

    #[error("image {height}x{width} is smaller than the network minimum {min}x{min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },

    #[error("cannot place {requested} instances (placed {placed}) after bounded retries")]
    SynthInfeasible { requested: usize, placed: usize },

    #[error("in-painting needs at least one background pixel")]
    NoBackground,

    #[error("domain {0} has no score records")]
    EmptyDomain(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: png: {reason}")]
    Png { path: PathBuf, reason: String },
}

pub type Result<T, E = DarcError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DarcError {
    let path = path.into();
    move |source| DarcError::Io { path, source }
}
