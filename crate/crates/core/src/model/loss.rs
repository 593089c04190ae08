use crate::error::{Error, Result};
use crate::numerics::{sigmoid_cross_entropy, Matrix, NumericsError};

/// Fails on the first target entry that is not exactly 0 or 1.
pub fn check_binary(y: &Matrix) -> Result<()> {
    match y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&v) => Err(Error::NonBinaryTarget(v)),
        None => Ok(()),
    }
}

/// Mean sigmoid cross-entropy over all `m x n` cells.
pub fn alignment_loss(logits: &Matrix, y: &Matrix) -> Result<f64> {
    if logits.shape() != y.shape() {
        return Err(NumericsError::Shape {
            op: "alignment_loss",
            left: logits.shape(),
            right: y.shape(),
        }
        .into());
    }
    check_binary(y)?;
    Ok(sigmoid_cross_entropy(logits, y))
}
