use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spectralds::distill::{coefficient_matrix, lambda_max};
use spectralds::{AlphaSampler, SpectralBasis};

use crate::record::{median, Summary};
use crate::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondRow {
    pub h: usize,
    pub seeds: usize,
    pub lambda_mean: f64,
    pub lambda_median: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Median over seeds of `lambda_max * h`.
    pub lambda_h_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondTable {
    pub rows: Vec<CondRow>,
    /// `per_seed[s][i]` is the value for seed `s` at `h_values[i]`.
    pub per_seed: Vec<Vec<f64>>,
}

impl CondTable {
    pub fn row(&self, h: usize) -> Option<&CondRow> {
        self.rows.iter().find(|r| r.h == h)
    }
}

/// Largest singular value of the coefficient pseudoinverse as the alpha set
/// grows. Each seed draws one sequence of distinct alphas and uses its
/// prefixes, so every `h` extends the set of the previous one.
pub fn cond_experiment(basis: &SpectralBasis, h_values: &[usize], seeds: &[u64], sampler: &AlphaSampler) -> Result<CondTable> {
    let k = basis.k();
    if h_values.is_empty() || seeds.is_empty() {
        return Err(BenchError::Config("need at least one h and one seed".into()));
    }
    if h_values[0] < k || h_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BenchError::Config(format!("h values must ascend from at least k = {k}")));
    }
    let h_max = *h_values.last().expect("non-empty");
    let per_seed = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<f64>> {
            let alphas = sampler.clone().with_seed(seed).sample_distinct(h_max, "cond")?;
            let m = coefficient_matrix(basis, &alphas)?;
            Ok(h_values.iter().map(|&h| lambda_max(&m.rows(0, h).into_owned())).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = h_values
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let vals: Vec<f64> = per_seed.iter().map(|s| s[i]).collect();
            let s = Summary::of(&vals);
            let scaled: Vec<f64> = vals.iter().map(|v| v * h as f64).collect();
            CondRow {
                h,
                seeds: vals.len(),
                lambda_mean: s.mean,
                lambda_median: median(&vals),
                lambda_min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                lambda_max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                lambda_h_median: median(&scaled),
            }
        })
        .collect();
    Ok(CondTable { rows, per_seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use spectralds::lds::mu_filter;
    use spectralds::{compute_basis, HankelSpec};

    #[test]
    fn single_alpha_single_filter() {
        let b = compute_basis(HankelSpec::new(128).unwrap(), 1).unwrap();
        let t = cond_experiment(&b, &[1], &[3], &AlphaSampler::new(0)).unwrap();
        let alpha = AlphaSampler::new(3).sample_distinct(1, "cond").unwrap()[0];
        let mu = mu_filter(alpha, 128).unwrap();
        let m: f64 = b.filter(0).iter().zip(&mu).map(|(p, q)| p * q).sum();
        let expect = 1.0 / m.abs();
        assert!((t.rows[0].lambda_median - expect).abs() <= 1e-10 * expect);
    }

    #[test]
    fn square_regime_is_ill_conditioned() {
        let b = compute_basis(HankelSpec::new(256).unwrap(), 8).unwrap();
        let seeds: Vec<u64> = (0..6).collect();
        let t = cond_experiment(&b, &[8, 16, 32], &seeds, &AlphaSampler::new(0)).unwrap();
        assert!(t.row(8).unwrap().lambda_median > 10.0 * t.row(32).unwrap().lambda_median);
    }

    #[test]
    fn adding_alphas_never_increases_lambda() {
        // Appending rows cannot shrink the smallest singular value.
        let b = compute_basis(HankelSpec::new(256).unwrap(), 6).unwrap();
        let t = cond_experiment(&b, &[6, 9, 12, 24], &[1, 2, 3], &AlphaSampler::new(0)).unwrap();
        for s in &t.per_seed {
            assert!(s.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
        }
    }

    #[test]
    fn rejects_h_below_k() {
        let b = compute_basis(HankelSpec::new(64).unwrap(), 4).unwrap();
        assert!(cond_experiment(&b, &[3, 8], &[0], &AlphaSampler::new(0)).is_err());
        assert!(cond_experiment(&b, &[8, 4], &[0], &AlphaSampler::new(0)).is_err());
    }

    #[test]
    fn deterministic() {
        let b = compute_basis(HankelSpec::new(128).unwrap(), 4).unwrap();
        let a = cond_experiment(&b, &[4, 8], &[5, 6], &AlphaSampler::new(0)).unwrap();
        let c = cond_experiment(&b, &[4, 8], &[5, 6], &AlphaSampler::new(0)).unwrap();
        assert_eq!(a, c);
    }
}
