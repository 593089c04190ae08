//! Versioned JSON documents shared by checkpoints and tuned artifacts.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u64,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a document carrying a top-level `format_version`. The version is probed
/// before the full parse so an unsupported file reports its version rather than
/// whatever field it happens to lack.
pub(crate) fn read_versioned<T: DeserializeOwned>(path: &Path, expected: u64) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_versioned(&text, path, expected)
}

pub(crate) fn parse_versioned<T: DeserializeOwned>(
    text: &str,
    path: &Path,
    expected: u64,
) -> Result<T> {
    let malformed = |e: serde_json::Error| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let probe: VersionProbe = serde_json::from_str(text).map_err(malformed)?;
    if probe.format_version != expected {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: probe.format_version,
            expected,
        });
    }
    serde_json::from_str(text).map_err(malformed)
}
