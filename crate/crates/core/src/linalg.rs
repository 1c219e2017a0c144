//! Small dense helpers shared by the inference engines and the oracle.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{BivasError, Result};

/// Relative eigenvalue threshold below which a Gram matrix counts as singular.
pub const RANK_TOL: f64 = 1e-10;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn sq_norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `x * ln(y)` with the convention `0 * ln(0) = 0`.
#[inline]
pub fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Column `j` of a column-major matrix as a contiguous slice.
#[inline]
pub fn column(m: &DMatrix<f64>, j: usize) -> &[f64] {
    let n = m.nrows();
    &m.as_slice()[j * n..(j + 1) * n]
}

/// Cholesky factor of `Z'Z`, rejecting numerically singular Gram matrices.
pub fn gram_cholesky(z: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let gram = z.transpose() * z;
    if gram.nrows() > 0 {
        let eig = SymmetricEigen::new(gram.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        let ratio = if max > 0.0 { min / max } else { 0.0 };
        if ratio.is_nan() || ratio < RANK_TOL {
            return Err(BivasError::RankDeficientZ { ratio });
        }
    }
    Cholesky::new(gram).ok_or(BivasError::RankDeficientZ { ratio: 0.0 })
}

/// Least-squares coefficients of `target` on the columns of `z`, given the
/// Cholesky factor of `Z'Z`.
pub fn ols_with(chol: &Cholesky<f64, Dyn>, z: &DMatrix<f64>, target: &DVector<f64>) -> DVector<f64> {
    chol.solve(&(z.transpose() * target))
}
