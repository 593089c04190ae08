use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate checkpoint: {0}")]
    DegenerateCheckpoint(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("alignment targets must be 0 or 1, found {0}")]
    NonBinaryTarget(f64),
    #[error("frozen tensor {0} changed during tuning")]
    FrozenTensorChanged(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: format version {found} is not supported (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u64,
        expected: u64,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("not enough samples for {shots} shots of concepts {deficient:?}")]
    Coverage { shots: usize, deficient: Vec<usize> },
    #[error(
        "no cell reaches confidence {threshold} (highest seen {best:.4}); lower the threshold"
    )]
    Threshold { threshold: f64, best: f64 },
    #[error("artifact does not match checkpoint: {0}")]
    ArtifactMismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
