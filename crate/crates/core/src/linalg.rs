//! Dense decompositions with a fixed ordering.
//!
//! SVD and symmetric eigendecompositions go through faer, which stays
//! accurate on rank-deficient input; the rest of the crate works in nalgebra.

use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector, Matrix3};

fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Thin SVD with singular values sorted in nonincreasing order.
/// Returns `(U, s, Vt)` with `U: m x r`, `Vt: r x n`, `r = min(m, n)`.
pub(crate) fn svd_desc(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let r = m.nrows().min(m.ncols());
    if r == 0 {
        return (DMatrix::zeros(m.nrows(), 0), DVector::zeros(0), DMatrix::zeros(0, m.ncols()));
    }
    let svd = match to_faer(m).thin_svd() {
        Ok(svd) => svd,
        Err(_) => {
            let nan = f64::NAN;
            return (
                DMatrix::from_element(m.nrows(), r, nan),
                DVector::from_element(r, nan),
                DMatrix::from_element(r, m.ncols(), nan),
            );
        }
    };
    let u = from_faer(svd.U());
    let v = from_faer(svd.V());
    let sd = svd.S().column_vector();
    let s: Vec<f64> = (0..sd.nrows()).map(|i| sd[i]).collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let u = DMatrix::from_fn(u.nrows(), r, |row, c| u[(row, order[c])]);
    let vt = DMatrix::from_fn(r, v.nrows(), |row, c| v[(c, order[row])]);
    let s = DVector::from_iterator(r, order.iter().map(|&i| s[i]));
    (u, s, vt)
}

pub(crate) fn singular_values_desc(m: &DMatrix<f64>) -> DVector<f64> {
    let mut s: Vec<f64> = to_faer(m)
        .singular_values()
        .unwrap_or_else(|_| vec![f64::NAN; m.nrows().min(m.ncols())]);
    s.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(s)
}

pub(crate) fn svd3(m: &Matrix3<f64>) -> (Matrix3<f64>, [f64; 3], Matrix3<f64>) {
    let (u, s, vt) = svd_desc(&DMatrix::from_fn(3, 3, |i, j| m[(i, j)]));
    (
        Matrix3::from_fn(|i, j| u[(i, j)]),
        [s[0], s[1], s[2]],
        Matrix3::from_fn(|i, j| vt[(i, j)]),
    )
}

/// Symmetric eigendecomposition with eigenvalues in nondecreasing order.
/// Eigenvector signs are fixed so the largest-magnitude entry is positive.
pub(crate) fn sym_eigen_asc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let n = sym.nrows();
    let Ok(eig) = to_faer(&sym).self_adjoint_eigen(Side::Lower) else {
        return (DVector::from_element(n, f64::NAN), DMatrix::from_element(n, n, f64::NAN));
    };
    let sd = eig.S().column_vector();
    let vals: Vec<f64> = (0..n).map(|i| sd[i]).collect();
    let u = from_faer(eig.U());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]).then(i.cmp(&j)));
    let mut vecs = DMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        let mut col = u.column(i).into_owned();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col.neg_mut();
        }
        vecs.set_column(c, &col);
    }
    let vals = DVector::from_iterator(n, order.iter().map(|&i| vals[i]));
    (vals, vecs)
}
