use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AlphaSampler, DistilledFilters};
use crate::error::{ensure, ensure_dims, Error, Result};
use crate::lds::geometric_filter;
use crate::linalg::{pinv, PINV_RCOND};
use crate::rng;
use crate::spectral_basis::{dot, SpectralBasis};

/// Stochastic solver settings for the sampled objective
/// `E_u |m^T Phi u - mu(alpha)^T u|^2`, `u ~ N(0, I_L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_steps: usize,
    /// Steps between convergence checks of the averaged iterate.
    pub window: usize,
    /// Max-norm change of the averaged iterate that counts as converged.
    pub tol: f64,
    /// Iterates before this step are excluded from the average.
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.25,
            batch: 32,
            max_steps: 20_000,
            window: 200,
            tol: 1e-6,
            burn_in: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationMode {
    Closed,
    Gd(SgdConfig),
}

/// Spectral coefficients `m` with `m^T Phi ~= mu_L(alpha)`.
pub fn find_spectral_representation(alpha: f64, basis: &SpectralBasis, mode: &RepresentationMode) -> Result<Vec<f64>> {
    ensure(alpha.is_finite() && alpha.abs() <= 1.0, || format!("alpha = {alpha} outside [-1, 1]"))?;
    let mu = geometric_filter(alpha, basis.len());
    match mode {
        RepresentationMode::Closed => basis.project(&mu),
        RepresentationMode::Gd(cfg) => sgd_representation(alpha, &mu, basis, cfg),
    }
}

fn sgd_representation(alpha: f64, mu: &[f64], basis: &SpectralBasis, cfg: &SgdConfig) -> Result<Vec<f64>> {
    ensure(cfg.batch >= 1 && cfg.window >= 1 && cfg.lr > 0.0, || "invalid SGD settings".into())?;
    let (l, k) = (basis.len(), basis.k());
    let mut r = rng::stream(cfg.seed, &format!("sgd-representation/{}", alpha.to_bits()));
    let mut m = vec![0.0; k];
    let mut avg = vec![0.0; k];
    let mut averaged = 0usize;
    let mut last_check: Option<Vec<f64>> = None;
    let mut u = vec![0.0; l];
    let mut z = vec![0.0; k];
    let mut grad = vec![0.0; k];
    for step in 0..cfg.max_steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..cfg.batch {
            for x in u.iter_mut() {
                *x = StandardNormal.sample(&mut r);
            }
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = dot(basis.filter(j), &u);
            }
            let err = dot(&m, &z) - dot(mu, &u);
            for (g, zj) in grad.iter_mut().zip(&z) {
                *g += 2.0 * err * zj / cfg.batch as f64;
            }
        }
        for (mj, g) in m.iter_mut().zip(&grad) {
            *mj -= cfg.lr * g;
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step,
                loss: f64::NAN,
                best: f64::NAN,
            });
        }
        if step < cfg.burn_in {
            continue;
        }
        averaged += 1;
        let w = 1.0 / averaged as f64;
        for (a, mj) in avg.iter_mut().zip(&m) {
            *a += w * (mj - *a);
        }
        if averaged.is_multiple_of(cfg.window) {
            if let Some(prev) = &last_check {
                let change = prev.iter().zip(&avg).map(|(p, a)| (p - a).abs()).fold(0.0, f64::max);
                if change < cfg.tol {
                    return Ok(avg);
                }
            }
            last_check = Some(avg.clone());
        }
    }
    Err(Error::Stalled(format!(
        "stochastic representation fit for alpha = {alpha} did not settle within {} steps",
        cfg.max_steps
    )))
}

/// Result of distilling a basis through sampled geometric filters.
#[derive(Debug, Clone)]
pub struct SpectralToLds {
    pub filters: DistilledFilters,
    /// Largest singular value of `mtilde`.
    pub lambda_max: f64,
    pub error_fro: f64,
    /// Rows `m_i`, `h x k`.
    pub coefficients: DMatrix<f64>,
    /// `||m_i^T Phi - mu_L(alpha_i)||_2` per row.
    pub row_residuals: Vec<f64>,
    /// `lambda_max * sum_i row_residuals[i]`.
    pub chain_bound: f64,
    /// `||mtilde M - I_k||_F`.
    pub inverse_defect: f64,
    pub resamples: usize,
}

const MAX_RESAMPLES: usize = 8;

/// Samples `h` distinct alphas and inverts their spectral coefficients.
pub fn spectral_to_lds(basis: &SpectralBasis, h: usize, sampler: &AlphaSampler) -> Result<SpectralToLds> {
    ensure(h >= basis.k(), || format!("h = {h} must be at least k = {}", basis.k()))?;
    let mut last = None;
    for attempt in 0..MAX_RESAMPLES {
        let alphas = sampler.sample_distinct(h, &format!("spectral-to-lds/{attempt}"))?;
        match distill_with_alphas(basis, alphas) {
            Ok(mut out) => {
                out.resamples = attempt;
                return Ok(out);
            }
            Err(Error::RankDeficient(msg)) => {
                log::warn!("coefficient matrix rank deficient ({msg}); resampling");
                last = Some(msg);
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::RankDeficient(last.unwrap_or_default()))
}

/// Rows `m_i = Phi^T mu_L(alpha_i)`, `h x k`.
pub fn coefficient_matrix(basis: &SpectralBasis, alphas: &[f64]) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(alphas.len(), basis.k());
    for (i, &a) in alphas.iter().enumerate() {
        ensure(a.is_finite() && a.abs() <= 1.0, || format!("alpha = {a} outside [-1, 1]"))?;
        for (j, v) in basis.project(&geometric_filter(a, basis.len()))?.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

/// Largest singular value of the exact pseudoinverse, `1 / s_min(M)`;
/// infinite when `M` has fewer than `k` nonzero singular values.
pub fn lambda_max(coefficients: &DMatrix<f64>) -> f64 {
    let k = coefficients.ncols();
    if coefficients.nrows() < k {
        return f64::INFINITY;
    }
    let s = coefficients.clone().svd(false, false).singular_values;
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
    if smin > 0.0 {
        1.0 / smin
    } else {
        f64::INFINITY
    }
}

/// Distillation through a fixed set of alphas.
pub fn distill_with_alphas(basis: &SpectralBasis, alphas: Vec<f64>) -> Result<SpectralToLds> {
    let (l, k, h) = (basis.len(), basis.k(), alphas.len());
    ensure_dims(h >= k, || format!("{h} alphas for k = {k} filters"))?;
    let mut coefficients = DMatrix::zeros(h, k);
    let mut row_residuals = Vec::with_capacity(h);
    for (i, &a) in alphas.iter().enumerate() {
        ensure(a.is_finite() && a.abs() <= 1.0, || format!("alpha = {a} outside [-1, 1]"))?;
        let mu = geometric_filter(a, l);
        let m = basis.project(&mu)?;
        let fit = basis.combine(&m)?;
        row_residuals.push(fit.iter().zip(&mu).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        for (j, v) in m.into_iter().enumerate() {
            coefficients[(i, j)] = v;
        }
    }
    let (mtilde, rank, s) = pinv(&coefficients, PINV_RCOND)?;
    if rank < k {
        return Err(Error::RankDeficient(format!("coefficient matrix has rank {rank} < k = {k}")));
    }
    let lambda_max = 1.0 / s[k - 1];
    let inverse_defect = (&mtilde * &coefficients - DMatrix::<f64>::identity(k, k)).norm();
    let filters = DistilledFilters::new(basis, alphas, mtilde, Some(lambda_max))?;
    let error_fro = filters.error_fro();
    let chain_bound = lambda_max * row_residuals.iter().sum::<f64>();
    Ok(SpectralToLds {
        filters,
        lambda_max,
        error_fro,
        coefficients,
        row_residuals,
        chain_bound,
        inverse_defect,
        resamples: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_norm;
    use crate::spectral_basis::{compute_basis, HankelSpec};
    use std::sync::OnceLock;

    fn basis_1024_32() -> &'static SpectralBasis {
        static B: OnceLock<SpectralBasis> = OnceLock::new();
        B.get_or_init(|| compute_basis(HankelSpec::new(1024).unwrap(), 32).unwrap())
    }

    fn basis_1024(k: usize) -> SpectralBasis {
        basis_1024_32().truncated(k).unwrap()
    }

    fn residual(alpha: f64, basis: &SpectralBasis) -> f64 {
        let m = find_spectral_representation(alpha, basis, &RepresentationMode::Closed).unwrap();
        let fit = basis.combine(&m).unwrap();
        let mu = geometric_filter(alpha, basis.len());
        fit.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    #[test]
    fn alpha_one_gives_zero_coefficients() {
        let m = find_spectral_representation(1.0, &basis_1024(8), &RepresentationMode::Closed).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_alpha_is_well_represented() {
        assert!(residual(0.5, &basis_1024(24)) <= 1e-3);
    }

    #[test]
    fn residual_decays_with_k() {
        let ks = [4, 8, 16, 24, 32];
        let logs: Vec<f64> = ks.iter().map(|&k| residual(0.9, &basis_1024(k)).ln()).collect();
        for w in logs.windows(2) {
            assert!(w[1] < w[0], "{logs:?}");
        }
        // least-squares slope of log residual against k
        let n = ks.len() as f64;
        let mx = ks.iter().sum::<usize>() as f64 / n;
        let my = logs.iter().sum::<f64>() / n;
        let sxy: f64 = ks.iter().zip(&logs).map(|(&k, y)| (k as f64 - mx) * (y - my)).sum();
        let sxx: f64 = ks.iter().map(|&k| (k as f64 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!(slope < 0.0);
        let ss_res: f64 = ks
            .iter()
            .zip(&logs)
            .map(|(&k, y)| (y - (my + slope * (k as f64 - mx))).powi(2))
            .sum();
        let ss_tot: f64 = logs.iter().map(|y| (y - my).powi(2)).sum();
        assert!(1.0 - ss_res / ss_tot > 0.9, "log residual far from affine in k");
    }

    #[test]
    fn stochastic_mode_agrees_with_closed_form() {
        let basis = basis_1024(24);
        let closed = find_spectral_representation(0.9, &basis, &RepresentationMode::Closed).unwrap();
        let gd = find_spectral_representation(0.9, &basis, &RepresentationMode::Gd(SgdConfig::default())).unwrap();
        let diff = closed.iter().zip(&gd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-4, "max diff {diff:e}");
    }

    #[test]
    fn stochastic_mode_reports_stall() {
        let cfg = SgdConfig {
            max_steps: 150,
            ..SgdConfig::default()
        };
        let r = find_spectral_representation(0.9, &basis_1024(4), &RepresentationMode::Gd(cfg));
        assert!(matches!(r, Err(Error::Stalled(_))));
    }

    #[test]
    fn pseudoinverse_is_left_inverse_and_chain_holds() {
        let basis = basis_1024(16);
        for seed in 0..3 {
            let out = spectral_to_lds(&basis, 64, &AlphaSampler::new(seed)).unwrap();
            assert!(out.inverse_defect <= 1e-8, "defect {:e}", out.inverse_defect);
            assert!(out.error_fro <= out.chain_bound, "{} > {}", out.error_fro, out.chain_bound);
            assert!((out.lambda_max - spectral_norm(out.filters.mtilde())).abs() <= 1e-8 * out.lambda_max);
            assert_eq!(out.filters.h(), 64);
        }
    }

    #[test]
    fn chain_holds_at_square_size() {
        let basis = basis_1024(8);
        let out = spectral_to_lds(&basis, 8, &AlphaSampler::new(5)).unwrap();
        assert!(out.error_fro <= out.chain_bound);
        assert!(out.lambda_max > 1.0);
    }

    #[test]
    fn overparameterization_shrinks_lambda_max() {
        let basis = basis_1024(24);
        let mut wins = 0;
        for seed in 0..10 {
            let s = AlphaSampler::new(seed);
            let alphas = s.sample_distinct(96, "lambda").unwrap();
            let small = lambda_max(&coefficient_matrix(&basis, &alphas[..24]).unwrap());
            let large = lambda_max(&coefficient_matrix(&basis, &alphas).unwrap());
            if large < small {
                wins += 1;
            }
        }
        assert!(wins >= 8, "only {wins}/10 seeds");
    }

    #[test]
    fn single_filter_inverse_is_reciprocal_norm() {
        let basis = basis_1024(1);
        let out = distill_with_alphas(&basis, vec![0.7]).unwrap();
        let m = out.coefficients[(0, 0)];
        assert!((out.lambda_max - 1.0 / m.abs()).abs() < 1e-12 / m.abs());
    }

    #[test]
    fn too_few_alphas_rejected() {
        assert!(spectral_to_lds(&basis_1024(8), 4, &AlphaSampler::new(0)).is_err());
    }
}
