use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AlphaSampler;
use crate::error::{ensure, ensure_dims, Result};
use crate::lds::DiagonalLds;
use crate::rng;
use crate::spectral_basis::SpectralBasis;
use crate::stu::{fit_stu_to_lds_io, GdConfig, ImpulseFitter};

/// Scalar system `y_t = c x_t`, `x_t = a x_{t-1} + b u_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemTriple {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// How bank rows get their spectral coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankFit {
    /// Joint least-squares fit over positive and sign-alternated filters.
    Joint,
    /// Projection onto the positive filters only.
    Projection,
    /// Gradient-descent STU fit on input/output data of the row system.
    Gd(GdConfig),
}

/// One fitted bank row.
#[derive(Debug, Clone, PartialEq)]
pub struct BankRow {
    pub triple: SystemTriple,
    pub psi: Vec<f64>,
    pub theta: Vec<f64>,
    pub theta_minus: Vec<f64>,
    /// Fit residual relative to `||psi||_2` (absolute when `psi = 0`).
    pub fit_error: f64,
}

/// Sampled scalar impulse responses with their spectral coefficients.
/// Impulses and coefficients are stored one row per column.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBank {
    triples: Vec<SystemTriple>,
    /// `L x N`.
    psi: DMatrix<f64>,
    /// `k x N`.
    theta: DMatrix<f64>,
    /// `k x N`; zero for positive-only fits.
    theta_minus: DMatrix<f64>,
    fit_errors: Vec<f64>,
    threshold: f64,
    attempted: usize,
}

impl PairBank {
    pub fn from_rows(rows: Vec<BankRow>, len: usize, k: usize, threshold: f64, attempted: usize) -> Result<Self> {
        let n = rows.len();
        let mut psi = DMatrix::zeros(len, n);
        let mut theta = DMatrix::zeros(k, n);
        let mut theta_minus = DMatrix::zeros(k, n);
        let mut triples = Vec::with_capacity(n);
        let mut fit_errors = Vec::with_capacity(n);
        for (i, row) in rows.into_iter().enumerate() {
            ensure_dims(row.psi.len() == len && row.theta.len() == k && row.theta_minus.len() == k, || {
                format!("bank row {i} has inconsistent dimensions")
            })?;
            ensure(row.triple.a.abs() <= 1.0, || format!("bank row {i} has |a| > 1"))?;
            ensure(row.fit_error <= threshold, || {
                format!("bank row {i} fit error {} exceeds threshold {threshold}", row.fit_error)
            })?;
            psi.column_mut(i).copy_from_slice(&row.psi);
            theta.column_mut(i).copy_from_slice(&row.theta);
            theta_minus.column_mut(i).copy_from_slice(&row.theta_minus);
            triples.push(row.triple);
            fit_errors.push(row.fit_error);
        }
        Ok(Self {
            triples,
            psi,
            theta,
            theta_minus,
            fit_errors,
            threshold,
            attempted: attempted.max(n),
        })
    }

    /// Retained rows.
    pub fn size(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.psi.nrows()
    }

    pub fn k(&self) -> usize {
        self.theta.nrows()
    }

    pub fn triples(&self) -> &[SystemTriple] {
        &self.triples
    }

    pub fn impulse(&self, i: usize) -> &[f64] {
        let l = self.len();
        &self.psi.as_slice()[i * l..(i + 1) * l]
    }

    pub fn theta(&self, i: usize) -> &[f64] {
        let k = self.k();
        &self.theta.as_slice()[i * k..(i + 1) * k]
    }

    pub fn theta_minus(&self, i: usize) -> &[f64] {
        let k = self.k();
        &self.theta_minus.as_slice()[i * k..(i + 1) * k]
    }

    /// All impulses as columns, `L x N`.
    pub fn psi_columns(&self) -> &DMatrix<f64> {
        &self.psi
    }

    /// All positive coefficients as columns, `k x N`.
    pub fn theta_columns(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn fit_errors(&self) -> &[f64] {
        &self.fit_errors
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn attempted(&self) -> usize {
        self.attempted
    }

    pub fn retention(&self) -> f64 {
        self.size() as f64 / self.attempted.max(1) as f64
    }
}

/// Impulse of `triple` and its coefficients under `mode`.
pub fn fit_triple(fitter: &ImpulseFitter, triple: SystemTriple, mode: &BankFit, seed: u64) -> Result<BankRow> {
    let basis = fitter.basis();
    let (l, k) = (basis.len(), basis.k());
    let lds = DiagonalLds::scalar(triple.c, triple.a, triple.b)?;
    let psi = lds.impulse_response(l).as_slice().to_vec();
    let (theta, theta_minus) = match mode {
        BankFit::Joint => {
            let (p, m, _) = fitter.fit_series(&psi)?;
            (p, m)
        }
        BankFit::Projection => (basis.project(&psi)?, vec![0.0; k]),
        BankFit::Gd(cfg) => {
            let cfg = GdConfig { seed, ..cfg.clone() };
            let fit = fit_stu_to_lds_io(&lds, basis, &cfg)?;
            (
                fit.params.m_plus().iter().map(|m| m[(0, 0)]).collect(),
                fit.params.m_minus().iter().map(|m| m[(0, 0)]).collect(),
            )
        }
    };
    let norm = psi.iter().map(|v| v * v).sum::<f64>().sqrt();
    let abs = kernel_error(basis, &theta, &theta_minus, &psi);
    let fit_error = if norm > 0.0 { abs / norm } else { abs };
    Ok(BankRow {
        triple,
        psi,
        theta,
        theta_minus,
        fit_error,
    })
}

/// `||sum_j theta_j phi_j + theta_minus_j negate(phi_j) - psi||_2`.
pub fn kernel_error(basis: &SpectralBasis, theta: &[f64], theta_minus: &[f64], psi: &[f64]) -> f64 {
    let mut err = 0.0;
    for (t, &target) in psi.iter().enumerate() {
        let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
        let mut v = 0.0;
        for j in 0..theta.len() {
            let p = basis.filter(j)[t];
            v += theta[j] * p + sign * theta_minus[j] * p;
        }
        err += (v - target) * (v - target);
    }
    err.sqrt()
}

/// Samples `n` rows in parallel and keeps those fitted within `threshold`.
/// Row `i` draws from its own stream, so the bank does not depend on the
/// worker count.
pub fn build_pair_bank(basis: &SpectralBasis, n: usize, sampler: &AlphaSampler, threshold: f64, mode: &BankFit) -> Result<PairBank> {
    ensure(n >= 1, || "bank size must be positive".into())?;
    ensure(threshold >= 0.0, || "threshold must be non-negative".into())?;
    sampler.validate()?;
    let fitter = ImpulseFitter::new(basis)?;
    let rows: Vec<Result<BankRow>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::substream(sampler.seed, "pair-bank", i as u64);
            let a = sampler.draw(&mut r);
            let b: f64 = StandardNormal.sample(&mut r);
            let c: f64 = StandardNormal.sample(&mut r);
            fit_triple(&fitter, SystemTriple { a, b, c }, mode, rng::stream_seed(sampler.seed, &format!("pair-bank-fit/{i}")))
        })
        .collect();
    let mut kept = Vec::new();
    for row in rows {
        let row = row?;
        if row.fit_error.is_finite() && row.fit_error <= threshold {
            kept.push(row);
        }
    }
    let bank = PairBank::from_rows(kept, basis.len(), basis.k(), threshold, n)?;
    if bank.retention() < 0.5 {
        log::warn!(
            "pair bank kept {}/{} rows at threshold {threshold:e}; threshold may be too tight for k = {}, L = {}",
            bank.size(),
            n,
            basis.k(),
            basis.len()
        );
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral_basis::{compute_basis, HankelSpec};

    fn basis(l: usize, k: usize) -> SpectralBasis {
        compute_basis(HankelSpec::new(l).unwrap(), k).unwrap()
    }

    #[test]
    fn memoryless_row_projects_onto_first_samples() {
        let b = basis(256, 8);
        let fitter = ImpulseFitter::new(&b).unwrap();
        let row = fit_triple(&fitter, SystemTriple { a: 0.0, b: 1.0, c: 1.0 }, &BankFit::Projection, 0).unwrap();
        assert_eq!(row.psi[0], 1.0);
        assert!(row.psi[1..].iter().all(|&v| v == 0.0));
        for j in 0..8 {
            assert_eq!(row.theta[j], b.filter(j)[0]);
        }
    }

    #[test]
    fn rows_match_impulse_and_fit_error() {
        let b = basis(256, 8);
        let bank = build_pair_bank(&b, 40, &AlphaSampler::new(2).signed(), f64::INFINITY, &BankFit::Joint).unwrap();
        assert_eq!(bank.size(), 40);
        for i in 0..bank.size() {
            let t = bank.triples()[i];
            let lds = DiagonalLds::scalar(t.c, t.a, t.b).unwrap();
            assert_eq!(bank.impulse(i), lds.impulse_response(256).as_slice());
            let err = kernel_error(&b, bank.theta(i), bank.theta_minus(i), bank.impulse(i));
            let norm = bank.impulse(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err <= bank.fit_errors()[i] * norm * (1.0 + 1e-12));
        }
    }

    #[test]
    fn joint_fit_retains_nearly_all_rows() {
        let b = basis(1024, 24);
        let bank = build_pair_bank(&b, 1000, &AlphaSampler::new(0).signed(), 1e-2, &BankFit::Joint).unwrap();
        assert!(bank.retention() >= 0.95, "retention {}", bank.retention());
        assert!(bank.fit_errors().iter().all(|&e| e <= 1e-2));
    }

    #[test]
    fn bank_is_deterministic() {
        let b = basis(128, 6);
        let s = AlphaSampler::new(11).signed();
        let x = build_pair_bank(&b, 30, &s, 1.0, &BankFit::Joint).unwrap();
        let y = build_pair_bank(&b, 30, &s, 1.0, &BankFit::Joint).unwrap();
        assert_eq!(x, y);
        let bits = |bank: &PairBank| bank.psi_columns().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&y));
    }

    #[test]
    fn bank_is_independent_of_worker_count() {
        let b = basis(128, 6);
        let s = AlphaSampler::new(4).signed();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let single = pool.install(|| build_pair_bank(&b, 25, &s, 1.0, &BankFit::Joint).unwrap());
        let multi = build_pair_bank(&b, 25, &s, 1.0, &BankFit::Joint).unwrap();
        assert_eq!(single, multi);
    }

    #[test]
    fn threshold_filters_rows() {
        let b = basis(256, 4);
        let s = AlphaSampler::new(1).signed();
        let all = build_pair_bank(&b, 60, &s, f64::INFINITY, &BankFit::Projection).unwrap();
        let tight = build_pair_bank(&b, 60, &s, 1e-3, &BankFit::Projection).unwrap();
        assert!(tight.size() < all.size());
        assert_eq!(tight.attempted(), 60);
        assert!(tight.fit_errors().iter().all(|&e| e <= 1e-3));
    }

    #[test]
    fn gd_rows_track_the_closed_form() {
        let b = basis(128, 4);
        let fitter = ImpulseFitter::new(&b).unwrap();
        let triple = SystemTriple { a: 0.8, b: 0.7, c: -1.1 };
        let cfg = GdConfig {
            seq_len: 128,
            steps: 600,
            ..GdConfig::default()
        };
        let gd = fit_triple(&fitter, triple, &BankFit::Gd(cfg), 3).unwrap();
        let closed = fit_triple(&fitter, triple, &BankFit::Joint, 0).unwrap();
        assert!(gd.fit_error <= closed.fit_error + 1e-2, "{} vs {}", gd.fit_error, closed.fit_error);
    }

    #[test]
    fn empty_request_rejected() {
        assert!(build_pair_bank(&basis(64, 2), 0, &AlphaSampler::new(0), 1.0, &BankFit::Joint).is_err());
    }
}
