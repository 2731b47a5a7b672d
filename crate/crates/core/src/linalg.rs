//! Dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Largest condition number accepted before a matrix is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is singular or ill-conditioned (condition number {condition:.3e})")]
    Singular { condition: f64 },
    #[error("matrix is not negative definite (eigenvalues in [{min:.3e}, {max:.3e}])")]
    NotNegativeDefinite { min: f64, max: f64 },
}

/// 2-norm condition number from the singular values.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a general square matrix, refusing ill-conditioned input.
pub fn inverse_checked(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let condition = condition_number(a);
    if condition.is_nan() || condition >= MAX_CONDITION {
        return Err(LinalgError::Singular { condition });
    }
    a.clone()
        .try_inverse()
        .ok_or(LinalgError::Singular { condition })
}

/// Inverse of a symmetric positive definite matrix via Cholesky, with the
/// same condition check.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let condition = condition_number(a);
    if condition.is_nan() || condition >= MAX_CONDITION {
        return Err(LinalgError::Singular { condition });
    }
    match a.clone().cholesky() {
        Some(c) => Ok(symmetrize(&c.inverse())),
        None => Err(LinalgError::Singular { condition }),
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `X^T diag(w) X`.
pub fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (mut row, &wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= wi;
    }
    x.transpose() * xw
}

/// `X^T diag(w) Z`.
pub fn weighted_cross(x: &DMatrix<f64>, w: &DVector<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut zw = z.clone();
    for (mut row, &wi) in zw.row_iter_mut().zip(w.iter()) {
        row *= wi;
    }
    x.transpose() * zw
}

/// Extreme eigenvalues of a symmetric matrix.
pub fn eigen_range(a: &DMatrix<f64>) -> (f64, f64) {
    let ev = symmetrize(a).symmetric_eigenvalues();
    (ev.min(), ev.max())
}
