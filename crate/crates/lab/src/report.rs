//! Aggregation of result records into mean and spread per configuration, plus
//! CSV dumps of attention maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdpt_core::methods::{Artifact, Method, Recipe, TuneConfig};
use sdpt_core::model::load_checkpoint;
use sdpt_core::numerics::Matrix;
use sdpt_core::TensorMap;

use crate::error::{LabError, Result};
use crate::record::MetricsRecord;

/// One row of the report: every record sharing command, method, `k` and layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub command: String,
    pub method: String,
    pub k: usize,
    pub layers: String,
    pub runs: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
    pub trainable_params: usize,
}

/// Mean and sample standard deviation; the spread of a single value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(records: &[MetricsRecord]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, Method, usize, String), Vec<&MetricsRecord>> =
        BTreeMap::new();
    for r in records {
        groups
            .entry((r.command.clone(), r.method, r.k, r.layers.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((command, method, k, layers), rs)| {
            let f1: Vec<f64> = rs.iter().map(|r| r.f1).collect();
            let map: Vec<f64> = rs.iter().map(|r| r.map).collect();
            let (f1_mean, f1_std) = mean_std(&f1);
            let (map_mean, map_std) = mean_std(&map);
            Aggregate {
                command,
                method: method.to_string(),
                k,
                layers,
                runs: rs.len(),
                f1_mean,
                f1_std,
                map_mean,
                map_std,
                trainable_params: rs[0].trainable_params,
            }
        })
        .collect()
}

pub fn format_table(rows: &[Aggregate]) -> String {
    let mut out = format!(
        "{:<10} {:<14} {:>3} {:<10} {:>4} {:>17} {:>17} {:>8}\n",
        "command", "method", "k", "layers", "runs", "f1", "map", "params"
    );
    for a in rows {
        let _ = writeln!(
            out,
            "{:<10} {:<14} {:>3} {:<10} {:>4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>8}",
            a.command,
            a.method,
            a.k,
            a.layers,
            a.runs,
            a.f1_mean,
            a.f1_std,
            a.map_mean,
            a.map_std,
            a.trainable_params
        );
    }
    out
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> LabError + '_ {
    move |source| LabError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    Ok(())
}

pub fn write_csv(path: &Path, rows: &[Aggregate]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<Aggregate>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err(path))
}

/// Writes a matrix as headerless CSV, one row per line, values at full
/// round-trip precision.
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    for r in 0..m.rows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let row = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| sdpt_core::Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    let count = rows.len();
    Ok(Matrix::from_vec(count, cols, rows.concat()).map_err(sdpt_core::Error::from)?)
}

/// Dumps the cross-attention weights (one row per image token, prototype rows
/// included) of the first `samples` held-out samples for
/// every record that names an artifact, and for zero-shot records. Records of
/// sweeps keep no artifact and are skipped.
pub fn dump_attention(
    records: &[MetricsRecord],
    samples: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if samples == 0 {
        return Ok(written);
    }
    for r in records {
        let artifact = match &r.artifact {
            Some(path) => Some(Artifact::load(path)?),
            None if r.method == Method::ZeroShot => None,
            None => continue,
        };
        let ckpt = load_checkpoint(&r.checkpoint)?;
        let (recipe, params) = match &artifact {
            Some(a) => a.bind(&ckpt)?,
            None => (
                Recipe::new(&ckpt, Method::ZeroShot, TuneConfig::default(), None)?,
                TensorMap::default(),
            ),
        };
        let eval = r.config.target_eval(r.seed)?;
        for (i, sample) in eval.iter().take(samples).enumerate() {
            for (layer, map) in recipe.attention(&params, sample)?.iter().enumerate() {
                let path = dir.join(format!(
                    "{}-{}-k{}-seed{}-sample{i}-layer{}.csv",
                    r.command,
                    r.method,
                    r.k,
                    r.seed,
                    layer + 1
                ));
                write_matrix(&path, map)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
