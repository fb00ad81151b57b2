use nalgebra::DMatrix;

use crate::error::{ensure, ensure_dims, Result};
use crate::lds::geometric_filter;
use crate::spectral_basis::SpectralBasis;

/// Geometric filters `mu_L(alpha_i)` and mixing weights `mtilde` (`k x h`)
/// with `phi_j ~= sum_i mtilde[j,i] mu_L(alpha_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistilledFilters {
    len: usize,
    alphas: Vec<f64>,
    mtilde: DMatrix<f64>,
    error_fro: f64,
    lambda_max: Option<f64>,
}

impl DistilledFilters {
    /// Builds the filters and records their reconstruction error against
    /// `basis`.
    pub fn new(basis: &SpectralBasis, alphas: Vec<f64>, mtilde: DMatrix<f64>, lambda_max: Option<f64>) -> Result<Self> {
        let mut out = Self::from_parts(basis.len(), alphas, mtilde, f64::NAN, lambda_max)?;
        ensure_dims(out.k() == basis.k(), || {
            format!("mtilde has {} rows, basis has k = {}", out.k(), basis.k())
        })?;
        out.error_fro = out.errors(basis)?.1;
        Ok(out)
    }

    /// Reassembles stored filters without recomputing the error.
    pub fn from_parts(len: usize, alphas: Vec<f64>, mtilde: DMatrix<f64>, error_fro: f64, lambda_max: Option<f64>) -> Result<Self> {
        ensure_dims(mtilde.ncols() == alphas.len(), || {
            format!("mtilde has {} columns for {} alphas", mtilde.ncols(), alphas.len())
        })?;
        ensure(alphas.iter().all(|a| a.is_finite() && a.abs() <= 1.0), || "alphas must lie in [-1, 1]".into())?;
        ensure(alphas.len() >= mtilde.nrows(), || {
            format!("state dimension {} is below the filter count {}", alphas.len(), mtilde.nrows())
        })?;
        ensure(len >= 1, || "filter length must be positive".into())?;
        Ok(Self {
            len,
            alphas,
            mtilde,
            error_fro,
            lambda_max,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn k(&self) -> usize {
        self.mtilde.nrows()
    }

    pub fn h(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn mtilde(&self) -> &DMatrix<f64> {
        &self.mtilde
    }

    /// Frobenius reconstruction error recorded at creation.
    pub fn error_fro(&self) -> f64 {
        self.error_fro
    }

    pub fn lambda_max(&self) -> Option<f64> {
        self.lambda_max
    }

    /// `diag(1 - alpha_i)` as a vector.
    pub fn gamma(&self) -> Vec<f64> {
        self.alphas.iter().map(|a| 1.0 - a).collect()
    }

    /// `mtilde * diag(gamma)`, the output map of the assembled filter LDS.
    pub fn output_map(&self) -> DMatrix<f64> {
        let mut c = self.mtilde.clone();
        for (i, g) in self.gamma().into_iter().enumerate() {
            c.column_mut(i).scale_mut(g);
        }
        c
    }

    /// `L x h` matrix whose columns are `mu_L(alpha_i)`.
    pub fn mu_stack(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.len, self.h());
        for (i, &a) in self.alphas.iter().enumerate() {
            out.column_mut(i).copy_from_slice(&geometric_filter(a, self.len));
        }
        out
    }

    /// Reconstructed filters, `L x k`.
    pub fn reconstruction(&self) -> DMatrix<f64> {
        self.mu_stack() * self.mtilde.transpose()
    }

    /// Per-filter L2 errors and the Frobenius error against `basis`.
    pub fn errors(&self, basis: &SpectralBasis) -> Result<(Vec<f64>, f64)> {
        ensure_dims(basis.k() == self.k() && basis.len() == self.len, || {
            format!(
                "distilled filters are k={} L={}, basis is k={} L={}",
                self.k(),
                self.len,
                basis.k(),
                basis.len()
            )
        })?;
        let diff = self.reconstruction() - basis.phi();
        let per: Vec<f64> = diff.column_iter().map(|c| c.norm()).collect();
        let fro = per.iter().map(|e| e * e).sum::<f64>().sqrt();
        Ok((per, fro))
    }
}
