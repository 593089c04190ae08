//! Cell-level alignment metrics over a set of `m x n` logit matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid_cross_entropy, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Micro F1 over all cells at `sigmoid(logit) >= 0.5`.
    pub f1: f64,
    /// Average precision over all cells ranked by logit.
    pub map: f64,
    /// Mean per-sample alignment loss.
    pub loss: f64,
}

fn check_pairs(logits: &[Matrix], targets: &[Matrix]) -> Result<()> {
    if logits.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit matrices for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    for (i, (l, y)) in logits.iter().zip(targets).enumerate() {
        if l.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "sample {i}: logits {:?} vs targets {:?}",
                l.shape(),
                y.shape()
            )));
        }
    }
    Ok(())
}

/// `2tp / (2tp + fp + fn)`; 1 when there are neither positives nor predictions.
pub fn f1_score(logits: &[Matrix], targets: &[Matrix]) -> Result<f64> {
    check_pairs(logits, targets)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (l, y) in logits.iter().zip(targets) {
        for (&s, &t) in l.data().iter().zip(y.data()) {
            // sigmoid(s) >= 0.5 exactly when s >= 0
            match (s >= 0.0, t == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// Area under the step precision-recall curve. Cells with equal scores enter
/// together, so an all-tied ranking scores the positive rate. 0 without
/// positives.
pub fn average_precision(logits: &[Matrix], targets: &[Matrix]) -> Result<f64> {
    check_pairs(logits, targets)?;
    let mut cells: Vec<(f64, bool)> = logits
        .iter()
        .zip(targets)
        .flat_map(|(l, y)| l.data().iter().zip(y.data()).map(|(&s, &t)| (s, t == 1.0)))
        .collect();
    let positives = cells.iter().filter(|c| c.1).count();
    if positives == 0 {
        return Ok(0.0);
    }
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < cells.len() {
        let score = cells[i].0;
        let mut group_tp = 0;
        while i < cells.len() && cells[i].0 == score {
            group_tp += usize::from(cells[i].1);
            seen += 1;
            i += 1;
        }
        if group_tp > 0 {
            tp += group_tp;
            ap += (group_tp as f64 / positives as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

pub fn evaluate_logits(logits: &[Matrix], targets: &[Matrix]) -> Result<EvalMetrics> {
    check_pairs(logits, targets)?;
    let loss = if logits.is_empty() {
        0.0
    } else {
        logits
            .iter()
            .zip(targets)
            .map(|(l, y)| sigmoid_cross_entropy(l, y))
            .sum::<f64>()
            / logits.len() as f64
    };
    Ok(EvalMetrics {
        f1: f1_score(logits, targets)?,
        map: average_precision(logits, targets)?,
        loss,
    })
}
