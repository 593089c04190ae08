//! Self-training: the frozen model's confident cells become the labels for a
//! prompt-tuning run on an unlabeled pool.

use serde::{Deserialize, Serialize};

use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::methods::{Method, Recipe, TuneConfig, TuneReport};
use crate::model::FusionCheckpoint;
use crate::numerics::{sigmoid, Matrix};
use crate::tensors::TensorMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelConfig {
    /// Minimum `sigmoid(logit)` for a cell to become a positive.
    pub confidence_threshold: f64,
    /// Most positives kept per sample, highest confidence first.
    pub max_pseudo: usize,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.8,
            max_pseudo: 20,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "confidence_threshold {} outside (0, 1]",
                self.confidence_threshold
            )));
        }
        if self.max_pseudo == 0 {
            return Err(Error::Config("max_pseudo must be at least 1".into()));
        }
        Ok(())
    }
}

/// Binary targets from logits: cells at or above the threshold, at most
/// `max_pseudo` of them, ties broken by cell order.
///
/// The comparison runs in logit space, where a threshold of 1 maps to +inf, so
/// saturated `sigmoid` values never pass it.
pub fn pseudo_targets(logits: &Matrix, cfg: &PseudoLabelConfig) -> Matrix {
    let t = cfg.confidence_threshold;
    let cut = (t / (1.0 - t)).ln();
    let mut cells: Vec<(usize, f64)> = logits
        .data()
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, l)| l >= cut)
        .collect();
    cells.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut y = Matrix::zeros(logits.rows(), logits.cols());
    for &(i, _) in cells.iter().take(cfg.max_pseudo) {
        y.data_mut()[i] = 1.0;
    }
    y
}

/// The pool with its targets replaced by pseudo-labels from the frozen model.
/// Fails when no cell anywhere reaches the threshold.
pub fn pseudo_label(
    ckpt: &FusionCheckpoint,
    pool: &[GroundingSample],
    cfg: &PseudoLabelConfig,
) -> Result<Vec<GroundingSample>> {
    cfg.validate()?;
    let zero_shot = Recipe::new(ckpt, Method::ZeroShot, TuneConfig::default(), None)?;
    let logits = zero_shot.predict(&TensorMap::new(), pool)?;
    let labeled: Vec<GroundingSample> = pool
        .iter()
        .zip(&logits)
        .map(|(s, l)| GroundingSample {
            y: pseudo_targets(l, cfg),
            ..s.clone()
        })
        .collect();
    if labeled.iter().all(|s| s.y.sum() == 0.0) {
        let best = logits
            .iter()
            .flat_map(|l| l.data().iter().copied())
            .fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::Threshold {
            threshold: cfg.confidence_threshold,
            best: sigmoid(best),
        });
    }
    Ok(labeled)
}

#[derive(Clone, Debug)]
pub struct SelfTrainOutcome {
    pub params: TensorMap,
    pub report: TuneReport,
    /// Pseudo-positive count for each pool sample.
    pub pseudo_counts: Vec<usize>,
}

/// Pseudo-labels `pool` with the frozen model, tunes `cfg.k` prototype tokens on
/// them and evaluates on the labeled `eval` set.
pub fn self_train(
    ckpt: &FusionCheckpoint,
    pool: &[GroundingSample],
    eval: &[GroundingSample],
    pseudo: &PseudoLabelConfig,
    cfg: &TuneConfig,
) -> Result<SelfTrainOutcome> {
    let labeled = pseudo_label(ckpt, pool, pseudo)?;
    let pseudo_counts = labeled.iter().map(|s| s.y.sum() as usize).collect();
    let recipe = Recipe::new(ckpt, Method::Sdpt, cfg.clone(), None)?;
    let (params, report) = recipe.tune(&labeled, eval)?;
    Ok(SelfTrainOutcome {
        params,
        report,
        pseudo_counts,
    })
}
