//! One-sided Jacobi SVD and the Moore-Penrose pseudo-inverse built on it.

use super::{Matrix, NumericsError};

const MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `a = u * diag(sigma) * v^T`.
///
/// For an `m x n` input with `p = min(m, n)`: `u` is `m x p`, `v` is `n x p`, and
/// `sigma` holds `p` non-negative values in descending order.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn max_singular_value(&self) -> f64 {
        self.sigma.first().copied().unwrap_or(0.0)
    }

    pub fn min_singular_value(&self) -> f64 {
        self.sigma.last().copied().unwrap_or(0.0)
    }

    pub fn rank(&self, cutoff: f64) -> usize {
        self.sigma.iter().filter(|&&s| s > cutoff).count()
    }
}

/// SVD by Hestenes one-sided Jacobi rotations.
pub fn svd(a: &Matrix) -> Result<Svd, NumericsError> {
    if a.is_empty() {
        return Err(NumericsError::Empty("svd"));
    }
    if a.rows() >= a.cols() {
        jacobi_tall(a)
    } else {
        // a^T = u' s v'^T  =>  a = v' s u'^T
        let t = jacobi_tall(&a.transpose())?;
        Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        })
    }
}

/// Works on the columns of a copy of `a` (requires rows >= cols), orthogonalising
/// them pairwise until every pair is numerically orthogonal.
fn jacobi_tall(a: &Matrix) -> Result<Svd, NumericsError> {
    let (m, n) = a.shape();
    // Column-major working copies so each column is contiguous.
    let mut work: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..m).map(|r| a[(r, c)]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = f64::EPSILON * m as f64;
    let mut converged = false;
    let mut last_off = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        last_off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha: f64 = work[p].iter().map(|x| x * x).sum();
                let beta: f64 = work[q].iter().map(|x| x * x).sum();
                let gamma: f64 = work[p].iter().zip(&work[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                last_off = f64::max(last_off, off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NumericsError::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            off_diagonal: last_off,
        });
    }

    let norms: Vec<f64> = work
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        if s > 0.0 {
            for r in 0..m {
                u[(r, dst)] = work[src][r] / s;
            }
        }
        for r in 0..n {
            vm[(r, dst)] = v[src][r];
        }
    }
    Ok(Svd { u, sigma, v: vm })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

pub fn singular_values(a: &Matrix) -> Result<Vec<f64>, NumericsError> {
    Ok(svd(a)?.sigma)
}

/// Relative cutoff used when none is given: `1e-12 * max(rows, cols)`.
pub fn default_rcond(a: &Matrix) -> f64 {
    1e-12 * a.rows().max(a.cols()) as f64
}

/// Moore-Penrose pseudo-inverse. Singular values at or below `rcond * sigma_max`
/// are treated as zero. The result has shape `(w.cols, w.rows)`.
pub fn pinv(w: &Matrix, rcond: f64) -> Result<Matrix, NumericsError> {
    if !(rcond >= 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "rcond must be non-negative, got {rcond}"
        )));
    }
    let Svd { u, sigma, v } = svd(w)?;
    let cutoff = rcond * sigma.first().copied().unwrap_or(0.0);
    let (m, n) = w.shape();
    let mut out = Matrix::zeros(n, m);
    for (k, &s) in sigma.iter().enumerate() {
        if s <= cutoff {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..n {
            let vi = v[(i, k)] * inv;
            if vi == 0.0 {
                continue;
            }
            let row = out.row_mut(i);
            for (j, o) in row.iter_mut().enumerate() {
                *o += vi * u[(j, k)];
            }
        }
    }
    Ok(out)
}

pub fn pinv_default(w: &Matrix) -> Result<Matrix, NumericsError> {
    pinv(w, default_rcond(w))
}
