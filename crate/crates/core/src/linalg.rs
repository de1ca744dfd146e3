use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GlmmError, Result};

/// Pivot ratio below which a Cholesky factor is treated as singular.
const PIVOT_RATIO: f64 = 1e-14;

/// Cholesky factorisation that also rejects numerically singular matrices.
pub(crate) fn cholesky(a: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let max_diag = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let chol = a
        .cholesky()
        .ok_or_else(|| GlmmError::SingularSystem(format!("{what} is not positive definite")))?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v * v));
    if !(min_pivot > PIVOT_RATIO * max_diag) {
        return Err(GlmmError::SingularSystem(format!(
            "{what} is numerically singular (pivot {min_pivot:e}, scale {max_diag:e})"
        )));
    }
    Ok(chol)
}

/// `Aᵀ diag(w) B`.
pub(crate) fn weighted_cross(a: &DMatrix<f64>, w: &DVector<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut wb = b.clone();
    for (mut row, wi) in wb.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    a.transpose() * wb
}

/// `Aᵀ diag(w) v`.
pub(crate) fn weighted_cross_vec(a: &DMatrix<f64>, w: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    a.transpose() * v.component_mul(w)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Horizontal concatenation `[A | B]`.
pub(crate) fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.columns_mut(0, a.ncols()).copy_from(a);
    m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    m
}
