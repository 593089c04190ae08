use super::{Matrix, NumericsError};

/// Central-difference gradient of a scalar function of one matrix argument.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Matrix) -> f64,
    at: &Matrix,
    h: f64,
) -> Result<Matrix, NumericsError> {
    if !(h > 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    let mut probe = at.clone();
    let mut out = Matrix::zeros(at.rows(), at.cols());
    for i in 0..at.len() {
        let x = at.data()[i];
        probe.data_mut()[i] = x + h;
        let plus = f(&probe);
        probe.data_mut()[i] = x - h;
        let minus = f(&probe);
        probe.data_mut()[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFinite(format!(
                "function value at entry {i}: f(x+h)={plus}, f(x-h)={minus}"
            )));
        }
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Largest entry-wise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}
