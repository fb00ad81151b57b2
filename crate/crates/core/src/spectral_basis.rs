//! Hankel matrix `Z` and its dominant eigenpairs (the spectral filter bank).
//!
//! `Z[i,j] = 2 / ((i+j)^3 - (i+j))` with 1-based indices. Filters are
//! returned with the largest-magnitude entry positive.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{ensure, ensure_dims, Error, Result};
use crate::rng;

/// Matrix-vector products switch to the FFT path above this length.
pub const DENSE_MATVEC_MAX_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HankelSpec {
    len: usize,
}

impl HankelSpec {
    pub fn new(len: usize) -> Result<Self> {
        ensure(len >= 2, || format!("Hankel length must be at least 2, got {len}"))?;
        Ok(Self { len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len, self.len, |i, j| hankel_entry(i + 1, j + 1))
    }
}

/// Entry `Z[i,j]`, 1-based. Panics if `i` or `j` is zero.
pub fn hankel_entry(i: usize, j: usize) -> f64 {
    assert!(i >= 1 && j >= 1, "hankel_entry indices are 1-based");
    2.0 / diagonal_denominator(i + j)
}

// s^3 - s in exact integer arithmetic while it fits, so the only rounding
// is the final division.
fn diagonal_denominator(s: usize) -> f64 {
    let s = s as u128;
    (s * s * s - s) as f64
}

/// `Z v`, dense for short inputs and FFT-based otherwise.
pub fn hankel_matvec(spec: HankelSpec, v: &[f64]) -> Result<Vec<f64>> {
    if spec.len() <= DENSE_MATVEC_MAX_LEN {
        hankel_matvec_dense(spec, v)
    } else {
        HankelOperator::new(spec).apply(v)
    }
}

pub fn hankel_matvec_dense(spec: HankelSpec, v: &[f64]) -> Result<Vec<f64>> {
    let l = spec.len();
    ensure_dims(v.len() == l, || format!("vector length {} != L = {l}", v.len()))?;
    // Z only depends on i+j; tabulate the 2L-1 distinct values once.
    let diag: Vec<f64> = (2..=2 * l).map(|s| 2.0 / diagonal_denominator(s)).collect();
    Ok((0..l)
        .map(|i| v.iter().enumerate().map(|(j, x)| diag[i + j] * x).sum())
        .collect())
}

/// Matrix-free `Z` using the Hankel structure: `(Zv)_i` is entry `i + L - 1`
/// of the linear convolution of the anti-diagonal sequence with reversed `v`.
#[derive(Clone)]
pub struct HankelOperator {
    len: usize,
    n_fft: usize,
    kernel: Arc<Vec<Complex64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for HankelOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HankelOperator").field("len", &self.len).finish()
    }
}

impl HankelOperator {
    pub fn new(spec: HankelSpec) -> Self {
        let len = spec.len();
        let n_fft = (3 * len - 2).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n_fft);
        let inverse = planner.plan_fft_inverse(n_fft);
        let mut kernel = vec![Complex64::new(0.0, 0.0); n_fft];
        for (n, slot) in kernel.iter_mut().take(2 * len - 1).enumerate() {
            slot.re = 2.0 / diagonal_denominator(n + 2);
        }
        forward.process(&mut kernel);
        Self {
            len,
            n_fft,
            kernel: Arc::new(kernel),
            forward,
            inverse,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let l = self.len;
        ensure_dims(v.len() == l, || format!("vector length {} != L = {l}", v.len()))?;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for (slot, &x) in buf.iter_mut().zip(v.iter().rev()) {
            slot.re = x;
        }
        self.forward.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(self.kernel.iter()) {
            *b *= k;
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.n_fft as f64;
        Ok(buf[l - 1..2 * l - 1].iter().map(|c| c.re * scale).collect())
    }

    /// Applies `Z` to every column of `v`.
    pub fn apply_columns(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure_dims(v.nrows() == self.len, || {
            format!("matrix has {} rows, L = {}", v.nrows(), self.len)
        })?;
        let mut out = DMatrix::zeros(v.nrows(), v.ncols());
        for j in 0..v.ncols() {
            let col = self.apply(v.column(j).as_slice())?;
            out.column_mut(j).copy_from_slice(&col);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenMethod {
    /// Dense for `L <= dense_max_len`, subspace iteration above.
    Auto,
    Dense,
    Subspace,
}

#[derive(Debug, Clone)]
pub struct EigenConfig {
    pub method: EigenMethod,
    pub dense_max_len: usize,
    /// Extra block columns carried by subspace iteration.
    pub oversample: usize,
    pub max_iters: usize,
    /// Convergence threshold on `||Z x - s x|| / s_1`.
    pub tol: f64,
    /// Residual level still accepted when the iteration cap is reached.
    pub accept_tol: f64,
    /// Rayleigh-Ritz sweeps with the compensated dense product after the
    /// FFT-based iteration has converged; the FFT product carries additive
    /// rounding noise near `1e-16 s_1`, which swamps filters with small `s`.
    pub refine_iters: usize,
    /// Extra block columns carried during refinement.
    pub refine_oversample: usize,
    pub seed: u64,
}

impl Default for EigenConfig {
    fn default() -> Self {
        Self {
            method: EigenMethod::Auto,
            dense_max_len: 2048,
            oversample: 16,
            max_iters: 300,
            tol: 1e-13,
            accept_tol: 1e-8,
            refine_iters: 3,
            refine_oversample: 8,
            seed: 0x5eed,
        }
    }
}

/// Top-`k` eigenpairs of `Z`. Filters are the columns of an `L x k` matrix,
/// so filter `j` (0-based) is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    sigma: Vec<f64>,
    phi: DMatrix<f64>,
}

impl SpectralBasis {
    /// Wraps precomputed eigenpairs; `phi` is `L x k`.
    pub fn from_parts(sigma: Vec<f64>, phi: DMatrix<f64>) -> Result<Self> {
        ensure_dims(sigma.len() == phi.ncols(), || {
            format!("{} eigenvalues for {} filters", sigma.len(), phi.ncols())
        })?;
        ensure(phi.nrows() >= 2, || "filter length must be at least 2".into())?;
        ensure(!sigma.is_empty() && sigma.len() <= phi.nrows(), || {
            format!("k = {} must lie in 1..={}", sigma.len(), phi.nrows())
        })?;
        Ok(Self { sigma, phi })
    }

    pub fn len(&self) -> usize {
        self.phi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// `L x k`, one filter per column.
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// Filter `j`, 0-based.
    pub fn filter(&self, j: usize) -> &[f64] {
        let l = self.len();
        &self.phi.as_slice()[j * l..(j + 1) * l]
    }

    pub fn negative_filter(&self, j: usize) -> Vec<f64> {
        negate_filter(self.filter(j))
    }

    /// Same eigenpairs restricted to the leading `k` filters.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        ensure(k >= 1 && k <= self.k(), || {
            format!("cannot truncate a {}-filter basis to {k}", self.k())
        })?;
        Ok(Self {
            sigma: self.sigma[..k].to_vec(),
            phi: self.phi.columns(0, k).into_owned(),
        })
    }

    /// Coefficients `<phi_j, v>` for all filters.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        ensure_dims(v.len() == self.len(), || {
            format!("signal length {} != L = {}", v.len(), self.len())
        })?;
        Ok((0..self.k()).map(|j| dot(self.filter(j), v)).collect())
    }

    /// `sum_j coef[j] phi_j`.
    pub fn combine(&self, coef: &[f64]) -> Result<Vec<f64>> {
        ensure_dims(coef.len() == self.k(), || {
            format!("{} coefficients for {} filters", coef.len(), self.k())
        })?;
        let mut out = vec![0.0; self.len()];
        for (j, &c) in coef.iter().enumerate() {
            for (o, &p) in out.iter_mut().zip(self.filter(j)) {
                *o += c * p;
            }
        }
        Ok(out)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[i] = (-1)^(i-1) v[i]` with 1-based `i`.
pub fn negate_filter(v: &[f64]) -> Vec<f64> {
    v.iter()
        .enumerate()
        .map(|(i, &x)| if i % 2 == 0 { x } else { -x })
        .collect()
}

pub fn compute_basis(spec: HankelSpec, k: usize) -> Result<SpectralBasis> {
    compute_basis_with(spec, k, &EigenConfig::default())
}

pub fn compute_basis_with(spec: HankelSpec, k: usize, cfg: &EigenConfig) -> Result<SpectralBasis> {
    let l = spec.len();
    ensure(k >= 1 && k <= l, || format!("k = {k} must lie in 1..={l}"))?;
    let dense = match cfg.method {
        EigenMethod::Dense => true,
        EigenMethod::Subspace => false,
        EigenMethod::Auto => l <= cfg.dense_max_len,
    };
    let (sigma, mut phi) = if dense {
        dense_top_k(spec, k)
    } else {
        let (sigma, phi) = subspace_top_k(spec, k, cfg)?;
        if cfg.refine_iters > 0 {
            refine(spec, phi, k, cfg)?
        } else {
            (sigma, phi)
        }
    };
    fix_signs(&mut phi);
    SpectralBasis::from_parts(sigma, phi)
}

fn dense_top_k(spec: HankelSpec, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(spec.dense());
    sorted_top_k(&eig.eigenvalues, &eig.eigenvectors, k)
}

fn sorted_top_k(values: &DVector<f64>, vectors: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let sigma = order[..k].iter().map(|&i| values[i]).collect();
    let phi = DMatrix::from_fn(vectors.nrows(), k, |r, c| vectors[(r, order[c])]);
    (sigma, phi)
}

/// Block subspace iteration with Rayleigh-Ritz extraction. Converged leading
/// Ritz vectors are locked and the active block is kept orthogonal to them.
fn subspace_top_k(spec: HankelSpec, k: usize, cfg: &EigenConfig) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let l = spec.len();
    let op = HankelOperator::new(spec);
    let p = (k + cfg.oversample).min(l);
    let mut rng = rng::stream(cfg.seed, "hankel-subspace");
    let start = DMatrix::from_fn(l, p, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    let mut v = start.qr().q();

    let mut locked_vals: Vec<f64> = Vec::new();
    let mut locked = DMatrix::<f64>::zeros(l, 0);
    let mut sigma_1 = f64::NAN;
    let mut last_residual = f64::INFINITY;

    for iter in 0..cfg.max_iters {
        let w = op.apply_columns(&v)?;
        let mut h = v.transpose() * &w;
        h = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(h);
        let active = v.ncols();
        let (theta, y) = sorted_top_k(&eig.eigenvalues, &eig.eigenvectors, active);
        let x = &v * &y;
        let zx = &w * &y;
        if sigma_1.is_nan() || locked_vals.is_empty() {
            sigma_1 = theta[0];
        }
        let needed = k - locked_vals.len();
        let residuals: Vec<f64> = (0..needed)
            .map(|j| (zx.column(j) - x.column(j) * theta[j]).norm() / sigma_1)
            .collect();

        let newly = residuals.iter().take_while(|&&r| r <= cfg.tol).count();
        let finishing = iter + 1 == cfg.max_iters;
        last_residual = residuals.iter().copied().fold(0.0, f64::max);
        let lock = if newly == needed || (finishing && last_residual <= cfg.accept_tol) {
            needed
        } else {
            newly
        };
        if lock > 0 {
            locked_vals.extend_from_slice(&theta[..lock]);
            locked = concat_columns(&locked, &x.columns(0, lock).into_owned());
        }
        if locked_vals.len() == k {
            log::debug!("subspace iteration converged in {} iterations", iter + 1);
            return Ok((locked_vals, locked));
        }
        // Power step on the unconverged Ritz vectors, deflated against the
        // locked ones (twice, for orthogonality at the noise floor).
        let mut next = zx.columns(lock, active - lock).into_owned();
        for _ in 0..2 {
            if locked.ncols() > 0 {
                let coef = locked.transpose() * &next;
                next -= &locked * coef;
            }
            next = next.qr().q();
        }
        v = next;
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iters,
        max_residual: last_residual,
    })
}

/// Subspace sweeps seeded with `phi` plus random guard columns, using the
/// compensated product.
fn refine(spec: HankelSpec, phi: DMatrix<f64>, k: usize, cfg: &EigenConfig) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let l = spec.len();
    let p = (k + cfg.refine_oversample).min(l);
    let mut rng = rng::stream(cfg.seed, "hankel-refine");
    let guard = DMatrix::from_fn(l, p - k, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    let mut v = concat_columns(&phi, &guard).qr().q();
    let op = CompensatedHankel::new(spec);
    let mut out = None;
    for sweep in 0..cfg.refine_iters {
        let w = op.apply_columns(&v);
        let mut h = v.transpose() * &w;
        h = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(h);
        let (theta, y) = sorted_top_k(&eig.eigenvalues, &eig.eigenvectors, p);
        let x = &v * &y;
        let zx = &w * &y;
        let residual = (0..k)
            .map(|j| (zx.column(j) - x.column(j) * theta[j]).norm() / theta[0])
            .fold(0.0, f64::max);
        log::debug!("refinement sweep {sweep}: max residual {residual:.3e}");
        if sweep + 1 == cfg.refine_iters {
            if residual > cfg.accept_tol {
                return Err(Error::NoConvergence {
                    iterations: cfg.max_iters + sweep + 1,
                    max_residual: residual,
                });
            }
            out = Some((theta[..k].to_vec(), x.columns(0, k).into_owned()));
        } else {
            v = zx.qr().q();
        }
    }
    Ok(out.expect("at least one refinement sweep"))
}

/// Dense `Z V` with the anti-diagonal values and the row sums held in
/// double-double precision (Dekker products, two-sum accumulation).
struct CompensatedHankel {
    len: usize,
    hi: Vec<f64>,
    lo: Vec<f64>,
    hi_split: Vec<(f64, f64)>,
}

const SPLITTER: f64 = 134_217_729.0; // 2^27 + 1

#[inline]
fn split(a: f64) -> (f64, f64) {
    let c = SPLITTER * a;
    let h = c - (c - a);
    (h, a - h)
}

impl CompensatedHankel {
    fn new(spec: HankelSpec) -> Self {
        let n = 2 * spec.len() - 1;
        let mut hi = Vec::with_capacity(n);
        let mut lo = Vec::with_capacity(n);
        for s in 2..=2 * spec.len() {
            // the denominator is an exact integer in f64 for the lengths used
            let d = diagonal_denominator(s);
            let q = 2.0 / d;
            let (qh, ql) = split(q);
            let (dh, dl) = split(d);
            let prod = q * d;
            let err = ((qh * dh - prod) + qh * dl + ql * dh) + ql * dl;
            hi.push(q);
            lo.push(((2.0 - prod) - err) / d);
        }
        let hi_split = hi.iter().map(|&x| split(x)).collect();
        Self {
            len: spec.len(),
            hi,
            lo,
            hi_split,
        }
    }

    fn apply_columns(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let (l, p) = (self.len, v.ncols());
        let rows: Vec<f64> = (0..l).flat_map(|r| (0..p).map(move |c| (r, c))).map(|(r, c)| v[(r, c)]).collect();
        let splits: Vec<(f64, f64)> = rows.iter().map(|&x| split(x)).collect();
        let mut out = DMatrix::zeros(l, p);
        let mut acc_hi = vec![0.0; p];
        let mut acc_lo = vec![0.0; p];
        for i in 0..l {
            acc_hi.iter_mut().for_each(|x| *x = 0.0);
            acc_lo.iter_mut().for_each(|x| *x = 0.0);
            for j in 0..l {
                let g = self.hi[i + j];
                let gl = self.lo[i + j];
                let (gh, gs) = self.hi_split[i + j];
                let xs = &rows[j * p..(j + 1) * p];
                let sp = &splits[j * p..(j + 1) * p];
                for c in 0..p {
                    let x = xs[c];
                    let (xh, xl) = sp[c];
                    let prod = g * x;
                    let perr = ((gh * xh - prod) + gh * xl + gs * xh) + gs * xl + gl * x;
                    let a = acc_hi[c];
                    let sum = a + prod;
                    let bb = sum - a;
                    let serr = (a - (sum - bb)) + (prod - bb);
                    acc_hi[c] = sum;
                    acc_lo[c] += serr + perr;
                }
            }
            for c in 0..p {
                out[(i, c)] = acc_hi[c] + acc_lo[c];
            }
        }
        out
    }
}

fn concat_columns(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows().max(b.nrows()), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

fn fix_signs(phi: &mut DMatrix<f64>) {
    for mut col in phi.column_iter_mut() {
        let mut best = 0usize;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn entry_examples() {
        assert_eq!(hankel_entry(1, 1), 1.0 / 3.0);
        assert_eq!(hankel_entry(1, 2), 1.0 / 12.0);
        assert_eq!(hankel_entry(2, 2), 1.0 / 30.0);
    }

    #[test]
    fn entries_symmetric() {
        for i in 1..=64 {
            for j in 1..=64 {
                assert_eq!(hankel_entry(i, j), hankel_entry(j, i));
            }
        }
    }

    #[test]
    fn matvec_examples() {
        let spec = HankelSpec::new(2).unwrap();
        assert_eq!(hankel_matvec(spec, &[1.0, 0.0]).unwrap(), vec![1.0 / 3.0, 1.0 / 12.0]);
        assert_eq!(hankel_matvec(spec, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);

        let spec = HankelSpec::new(3).unwrap();
        let out = hankel_matvec(spec, &[1.0, 1.0, 1.0]).unwrap();
        for (i, o) in out.iter().enumerate() {
            let row: f64 = (1..=3).map(|j| 2.0 / (((i + 1 + j) as f64).powi(3) - (i + 1 + j) as f64)).sum();
            assert!((o - row).abs() < 1e-16);
        }
    }

    #[test]
    fn matvec_rejects_wrong_length() {
        let spec = HankelSpec::new(4).unwrap();
        assert!(matches!(hankel_matvec(spec, &[1.0; 3]), Err(Error::DimensionMismatch(_))));
        assert!(HankelOperator::new(spec).apply(&[1.0; 5]).is_err());
    }

    #[test]
    fn short_spec_rejected() {
        assert!(HankelSpec::new(1).is_err());
    }

    #[test]
    fn two_by_two_eigenvalues() {
        let spec = HankelSpec::new(2).unwrap();
        let (a, b, d): (f64, f64, f64) = (1.0 / 3.0, 1.0 / 12.0, 1.0 / 30.0);
        let top = 0.5 * (a + d) + (0.25 * (a - d) * (a - d) + b * b).sqrt();
        let b1 = compute_basis(spec, 1).unwrap();
        assert!((b1.sigma()[0] - top).abs() < 1e-15);
        assert!((b1.sigma()[0] - 0.35495).abs() < 5e-5);
        let b2 = compute_basis(spec, 2).unwrap();
        assert!((b2.sigma().iter().sum::<f64>() - 11.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn spectrum_decays_fast() {
        let basis = compute_basis(HankelSpec::new(256).unwrap(), 16).unwrap();
        assert!(basis.sigma()[15] / basis.sigma()[0] < 1e-10);
    }

    #[test]
    fn negate_examples() {
        assert_eq!(negate_filter(&[1.0, 1.0, 1.0, 1.0]), vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!(negate_filter(&[2.5]), vec![2.5]);
        let v = [0.3, -1.2, 4.0, 0.0, 7.5];
        assert_eq!(negate_filter(&negate_filter(&v)), v.to_vec());
    }

    #[test]
    fn largest_entry_positive() {
        let basis = compute_basis(HankelSpec::new(128).unwrap(), 8).unwrap();
        for j in 0..8 {
            let f = basis.filter(j);
            let m = f.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(m > 0.0);
        }
    }

    #[test]
    fn subspace_agrees_with_dense() {
        let spec = HankelSpec::new(600).unwrap();
        let dense = compute_basis_with(spec, 12, &EigenConfig { method: EigenMethod::Dense, ..Default::default() }).unwrap();
        let sub = compute_basis_with(spec, 12, &EigenConfig { method: EigenMethod::Subspace, ..Default::default() }).unwrap();
        for j in 0..12 {
            assert!((dense.sigma()[j] - sub.sigma()[j]).abs() <= 1e-13 * dense.sigma()[0]);
        }
        // Leading filters are well separated; the trailing ones sit near the
        // noise floor and need only satisfy the eigen-residual bound.
        for j in 0..8 {
            let d: f64 = dense.filter(j).iter().zip(sub.filter(j)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-8, "filter {j} differs by {d}");
        }
    }

    #[test]
    fn refined_trailing_filters_agree_with_dense() {
        let spec = HankelSpec::new(2048).unwrap();
        let k = 24;
        let dense = compute_basis_with(spec, k, &EigenConfig { method: EigenMethod::Dense, ..Default::default() }).unwrap();
        let sub = compute_basis_with(spec, k, &EigenConfig { method: EigenMethod::Subspace, ..Default::default() }).unwrap();
        for j in 0..k {
            let rel = (dense.sigma()[j] - sub.sigma()[j]).abs() / dense.sigma()[j];
            assert!(rel < 1e-6, "sigma {j} relative gap {rel}");
            let d: f64 = dense.filter(j).iter().zip(sub.filter(j)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-4, "filter {j} differs by {d}");
        }
    }

    #[test]
    fn deterministic() {
        let spec = HankelSpec::new(300).unwrap();
        assert_eq!(compute_basis(spec, 10).unwrap().phi(), compute_basis(spec, 10).unwrap().phi());
        let cfg = EigenConfig { method: EigenMethod::Subspace, ..Default::default() };
        assert_eq!(
            compute_basis_with(spec, 10, &cfg).unwrap().phi(),
            compute_basis_with(spec, 10, &cfg).unwrap().phi()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fft_matvec_matches_dense(seed in any::<u64>(), which in 0usize..3) {
            use rand::Rng;
            let l = [64, 256, 1024][which];
            let spec = HankelSpec::new(l).unwrap();
            let mut r = rng::stream(seed, "matvec");
            let v: Vec<f64> = (0..l).map(|_| r.random_range(-1.0..1.0)).collect();
            let d = hankel_matvec_dense(spec, &v).unwrap();
            let f = HankelOperator::new(spec).apply(&v).unwrap();
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            let err = d.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            prop_assert!(err <= 1e-10 * norm);
        }

        #[test]
        fn entry_formula_exact(i in 1usize..2000, j in 1usize..2000) {
            let s = (i + j) as f64;
            prop_assert_eq!(hankel_entry(i, j), 2.0 / (s * s * s - s));
        }
    }
}
