use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: cannot read config: {source}")]
    ConfigRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid config: {reason}")]
    ConfigParse { path: PathBuf, reason: String },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("{0}: checkpoint not found; run `sdpt-lab pretrain` with the same config first")]
    MissingCheckpoint(PathBuf),
    #[error("no result records found in {0:?}")]
    EmptyInput(Vec<PathBuf>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Core(#[from] sdpt_core::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for usage and configuration problems, 1 for
    /// failures while running.
    pub fn exit_code(&self) -> u8 {
        use sdpt_core::Error as Core;
        match self {
            Self::Usage(_)
            | Self::ConfigRead { .. }
            | Self::ConfigParse { .. }
            | Self::MissingArtifact(_) => 2,
            Self::Core(Core::Config(_) | Core::Threshold { .. } | Core::Coverage { .. }) => 2,
            _ => 1,
        }
    }
}
