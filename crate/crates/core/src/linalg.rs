//! Small dense helpers on top of nalgebra used by the samplers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_lower(a: &Matrix, what: &str) -> Result<Matrix> {
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("{what}: non-finite entries")));
    }
    nalgebra::Cholesky::new(a.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::Numeric(format!("{what}: matrix is not positive definite")))
}

/// Cholesky factor that tolerates zero pivots (positive semi-definite input).
///
/// Columns whose pivot falls below `tol * max_diag` are set to zero, which is
/// what a degenerate covariance such as `diag(1, 0)` needs.
pub fn psd_cholesky_lower(a: &Matrix, tol: f64) -> Result<Matrix> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension("psd_cholesky_lower needs a square matrix".into()));
    }
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !d.is_finite() {
            return Err(Error::Numeric("psd_cholesky_lower: non-finite pivot".into()));
        }
        if d <= tol * scale {
            if d < -1e-8 * scale {
                return Err(Error::Numeric("psd_cholesky_lower: matrix is indefinite".into()));
            }
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solve `L x = b` for lower-triangular `L`, column by column.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    l.solve_lower_triangular(b)
        .ok_or_else(|| Error::Numeric("singular triangular factor".into()))
}

/// Solve `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    l.tr_solve_lower_triangular(b)
        .ok_or_else(|| Error::Numeric("singular triangular factor".into()))
}

/// `A⁻¹ B` for SPD `A` given its lower Cholesky factor.
pub fn chol_solve(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let y = solve_lower(l, b)?;
    solve_lower_transpose(l, &y)
}

/// `log |A|` from the lower Cholesky factor of `A`.
pub fn chol_logdet(l: &Matrix) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn symmetrize(a: &mut Matrix) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Matrix) -> f64 {
    let mut s = a.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn is_spd(a: &Matrix) -> bool {
    a.nrows() == a.ncols()
        && a.iter().all(|v| v.is_finite())
        && nalgebra::Cholesky::new(a.clone()).is_some()
}

pub fn frobenius(a: &Matrix) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn column(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Numerical column rank via singular values.
pub fn column_rank(x: &Matrix) -> usize {
    if x.nrows() == 0 || x.ncols() == 0 {
        return 0;
    }
    let sv = x.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let tol = smax * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON * 16.0;
    sv.iter().filter(|s| **s > tol).count()
}
