use std::path::Path;

use serde::{Deserialize, Serialize};

use super::weights::{FusionCheckpoint, FORMAT_VERSION};
use super::Dims;
use crate::error::{Error, Result};
use crate::files::{parse_versioned, read_versioned, write_json};
use crate::tensors::TensorMap;

/// On-disk layout of a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub format_version: u64,
    pub rng_seed: u64,
    pub dims: Dims,
    pub tensors: TensorMap,
}

impl CheckpointFile {
    pub fn from_checkpoint(ckpt: &FusionCheckpoint) -> Self {
        Self {
            format_version: ckpt.format_version,
            rng_seed: ckpt.rng_seed,
            dims: ckpt.dims,
            tensors: ckpt.tensors(),
        }
    }

    pub fn into_checkpoint(self, path: &Path) -> Result<FusionCheckpoint> {
        FusionCheckpoint::from_tensors(self.dims, self.rng_seed, &self.tensors).map_err(|e| {
            Error::Malformed {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
        })
    }
}

pub fn save_checkpoint(ckpt: &FusionCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), &CheckpointFile::from_checkpoint(ckpt))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FusionCheckpoint> {
    let path = path.as_ref();
    let file: CheckpointFile = read_versioned(path, FORMAT_VERSION)?;
    file.into_checkpoint(path)
}

/// Serialized checkpoint text, identical to what [`save_checkpoint`] writes.
pub fn write_checkpoint(ckpt: &FusionCheckpoint) -> Result<String> {
    let mut text = serde_json::to_string_pretty(&CheckpointFile::from_checkpoint(ckpt))
        .map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Parses checkpoint text; `origin` only labels errors.
pub fn read_checkpoint(text: &str, origin: impl AsRef<Path>) -> Result<FusionCheckpoint> {
    let origin = origin.as_ref();
    let file: CheckpointFile = parse_versioned(text, origin, FORMAT_VERSION)?;
    file.into_checkpoint(origin)
}
