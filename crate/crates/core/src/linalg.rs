//! Dense linear-algebra helpers bridging `ndarray` storage and `faer` kernels.
//!
//! Everything here runs sequentially so results do not depend on the number
//! of worker threads.

use faer::{MatRef, Side};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::{Error, Result};

fn as_faer(a: &ArrayView2<'_, f64>) -> faer::Mat<f64> {
    let (r, c) = a.dim();
    match a.as_slice() {
        Some(s) => MatRef::from_row_major_slice(s, r, c).to_owned(),
        None => faer::Mat::from_fn(r, c, |i, j| a[[i, j]]),
    }
}

/// Symmetric eigendecomposition. Eigenvalues ascending; eigenvectors in columns.
pub fn sym_eigen(a: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::invalid("eigendecomposition needs a square matrix"));
    }
    let m = as_faer(&a);
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::numeric(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let values = Array1::from_iter((0..n).map(|i| s[i]));
    let vectors = Array2::from_shape_fn((n, n), |(i, j)| u[(i, j)]);
    Ok((values, vectors))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::invalid("eigendecomposition needs a square matrix"));
    }
    let m = as_faer(&a);
    let vals = m
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::numeric(format!("eigendecomposition failed: {e:?}")))?;
    Ok(Array1::from(vals))
}

/// Lower Cholesky factor, or `None` when the matrix is not numerically positive definite.
pub fn cholesky(a: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Some(l)
}

/// `log det` of a symmetric positive-definite matrix via Cholesky.
pub fn log_det_spd(a: ArrayView2<'_, f64>) -> Result<f64> {
    let l = cholesky(a).ok_or_else(|| Error::numeric("matrix is not positive definite"))?;
    Ok(2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>())
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky(a).ok_or_else(|| Error::numeric("matrix is not positive definite"))?;
    // invert L by forward substitution, then inv(A) = inv(L)^T inv(L)
    let mut li = Array2::<f64>::zeros((n, n));
    for c in 0..n {
        for i in c..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in c..i {
                s -= l[[i, k]] * li[[k, c]];
            }
            li[[i, c]] = s / l[[i, i]];
        }
    }
    Ok(li.t().dot(&li))
}

/// Row-wise squared norms.
pub fn row_sq_norms(a: ArrayView2<'_, f64>) -> Array1<f64> {
    a.map_axis(Axis(1), |r| r.dot(&r))
}

/// Pairwise Euclidean distances between the rows of `a`.
///
/// Uses the Gram-matrix identity for speed and clamps tiny negative squared
/// distances produced by cancellation. The result is exactly symmetric with
/// a zero diagonal.
pub fn pairwise_distances(a: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = a.nrows();
    let norms = row_sq_norms(a);
    let gram = a.dot(&a.t());
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (norms[i] + norms[j] - 2.0 * gram[[i, j]]).max(0.0).sqrt();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Exact pairwise distances by direct summation; slower but free of cancellation.
pub fn pairwise_distances_exact(a: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let ri = a.row(i);
        for j in (i + 1)..n {
            let v = ri
                .iter()
                .zip(a.row(j).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn eigen_reconstructs() {
        let a = array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let (vals, vecs) = sym_eigen(a.view()).unwrap();
        assert!(vals[0] <= vals[1] && vals[1] <= vals[2]);
        let rec = vecs.dot(&Array2::from_diag(&vals)).dot(&vecs.t());
        for (x, y) in rec.iter().zip(a.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let only = sym_eigenvalues(a.view()).unwrap();
        for (x, y) in only.iter().zip(vals.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn cholesky_and_inverse() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let l = cholesky(a.view()).unwrap();
        assert_abs_diff_eq!(l.dot(&l.t())[[0, 1]], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(log_det_spd(a.view()).unwrap(), 8f64.ln(), epsilon = 1e-14);
        let inv = spd_inverse(a.view()).unwrap();
        let id = inv.dot(&a);
        assert_abs_diff_eq!(id[[0, 0]], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(id[[0, 1]], 0.0, epsilon = 1e-14);
        assert!(cholesky(array![[1.0, 2.0], [2.0, 1.0]].view()).is_none());
    }

    #[test]
    fn distances_agree() {
        let a = array![[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]];
        let d = pairwise_distances(a.view());
        let e = pairwise_distances_exact(a.view());
        assert_abs_diff_eq!(d[[0, 1]], 5.0, epsilon = 1e-12);
        for (x, y) in d.iter().zip(e.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }
}
