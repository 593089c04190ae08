//! Result records: one JSON object per line in an append-only file.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdpt_core::methods::Method;
use sdpt_core::metrics::EvalMetrics;

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Subcommand that produced the record.
    pub command: String,
    pub method: Method,
    pub seed: u64,
    pub k: usize,
    /// Inserted layers for token methods, empty otherwise.
    pub layers: String,
    /// Micro F1 at `sigmoid(logit) >= 0.5` over held-out cells.
    pub f1: f64,
    /// Average precision over held-out cells.
    pub map: f64,
    pub loss: f64,
    pub train_loss: Vec<f64>,
    pub trainable_params: usize,
    pub wall_seconds: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Per-concept sample counts of a few-shot training set.
    pub concept_tally: Option<BTreeMap<usize, usize>>,
    /// Pseudo-positive cells per pool sample in self-training.
    pub pseudo_positives: Option<Vec<usize>>,
    /// Held-out metrics on the earlier task when tuning over frozen adapters.
    pub old_task: Option<EvalMetrics>,
    pub checkpoint: PathBuf,
    pub artifact: Option<PathBuf>,
    pub config: ExperimentConfig,
}

impl MetricsRecord {
    /// The record with its timing zeroed, for reproducibility comparisons.
    pub fn untimed(&self) -> Self {
        Self {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Appends each record as one line. Every line goes out in a single `write`
/// on a file opened in append mode, so concurrent writers never interleave
/// within a record.
pub fn append_records(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| LabError::io(path, e))?;
    for r in records {
        let mut line = serde_json::to_string(r).map_err(|e| LabError::io(path, e.into()))?;
        line.push('\n');
        file.write_all(line.as_bytes())
            .map_err(|e| LabError::io(path, e))?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                LabError::Core(sdpt_core::Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
        })
        .collect()
}
