//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative singular-value cutoff used for pseudoinverses.
pub const PINV_RCOND: f64 = 1e-12;

/// Moore-Penrose pseudoinverse with the given relative cutoff. Also returns
/// the numerical rank and the singular values of `a`, descending.
pub fn pinv(a: &DMatrix<f64>, rcond: f64) -> Result<(DMatrix<f64>, usize, Vec<f64>)> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.ok_or_else(|| Error::RankDeficient("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::RankDeficient("SVD failed".into()))?;
    let mut s: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    let smax = s.iter().fold(0.0f64, |m, &(_, v)| m.max(v));
    let cutoff = rcond * smax;
    let mut out = DMatrix::zeros(a.ncols(), a.nrows());
    let mut rank = 0;
    for &(i, si) in &s {
        if si > cutoff && si > 0.0 {
            rank += 1;
            out += (v_t.row(i).transpose() / si) * u.column(i).transpose();
        }
    }
    s.sort_by(|x, y| y.1.total_cmp(&x.1));
    Ok((out, rank, s.into_iter().map(|(_, v)| v).collect()))
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0f64, |m, &v| m.max(v))
}

/// Orthonormal basis of the columns of `a` (thin Householder QR).
pub fn orthonormal_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().qr().q()
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.norm()
}
