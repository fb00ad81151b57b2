use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spectralds::distill::{select_rows, PairBank, PracticalConfig, SelectionScore};
use spectralds::SpectralBasis;

use crate::record::median;
use crate::{BenchError, Result};

/// Reconstruction error against state dimension for one starting size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetCurve {
    pub h_start: usize,
    /// `errors[i]` is the error at `h_start + i` rows.
    pub errors: Vec<f64>,
    /// Median over the random trial subsets of size `h_start`.
    pub random_median: f64,
    pub stalled_steps: usize,
}

impl SubsetCurve {
    pub fn error_at(&self, h: usize) -> Option<f64> {
        h.checked_sub(self.h_start).and_then(|i| self.errors.get(i).copied())
    }

    pub fn last(&self) -> f64 {
        *self.errors.last().expect("curve has at least one point")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub h_start: usize,
    pub h: usize,
    pub error: f64,
}

/// Selection stages of practical distillation (no fine-tuning), one curve
/// per starting size.
pub fn subset_curve(
    bank: &PairBank,
    basis: &SpectralBasis,
    h_start_values: &[usize],
    h_max: usize,
    trials: usize,
    seed: u64,
    score: SelectionScore,
) -> Result<Vec<SubsetCurve>> {
    if h_max > bank.size() {
        return Err(BenchError::Config(format!("h_max = {h_max} exceeds bank size {}", bank.size())));
    }
    if h_start_values.iter().any(|&s| s == 0 || s > h_max) {
        return Err(BenchError::Config(format!("starting sizes must lie in 1..={h_max}")));
    }
    h_start_values
        .par_iter()
        .map(|&h_start| {
            let cfg = PracticalConfig {
                score,
                ..PracticalConfig::new(h_start, h_max, trials, seed)
            };
            let sel = select_rows(bank, basis, &cfg)?;
            Ok(SubsetCurve {
                h_start,
                random_median: median(&sel.trial_errors),
                errors: sel.curve,
                stalled_steps: sel.stalled_steps,
            })
        })
        .collect()
}

pub fn curve_points(curves: &[SubsetCurve]) -> Vec<CurvePoint> {
    curves
        .iter()
        .flat_map(|c| {
            c.errors.iter().enumerate().map(move |(i, &error)| CurvePoint {
                h_start: c.h_start,
                h: c.h_start + i,
                error,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use spectralds::distill::{build_pair_bank, BankFit};
    use spectralds::{compute_basis, AlphaSampler, HankelSpec};
    use std::sync::OnceLock;

    fn fixture() -> &'static (SpectralBasis, PairBank) {
        static F: OnceLock<(SpectralBasis, PairBank)> = OnceLock::new();
        F.get_or_init(|| {
            let b = compute_basis(HankelSpec::new(512).unwrap(), 8).unwrap();
            let bank = build_pair_bank(&b, 400, &AlphaSampler::new(2), f64::INFINITY, &BankFit::Joint).unwrap();
            (b, bank)
        })
    }

    #[test]
    fn curves_are_non_increasing() {
        let (b, bank) = fixture();
        let curves = subset_curve(bank, b, &[8, 12, 16], 30, 20, 1, SelectionScore::Refit).unwrap();
        for c in &curves {
            assert_eq!(c.errors.len(), 30 - c.h_start + 1);
            assert!(c.errors.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)), "{:?}", c.errors);
        }
    }

    #[test]
    fn best_trial_beats_random_median() {
        let (b, bank) = fixture();
        let curves = subset_curve(bank, b, &[16], 16, 100, 4, SelectionScore::Refit).unwrap();
        assert!(curves[0].errors[0] <= curves[0].random_median);
    }

    #[test]
    fn points_flatten_curves() {
        let (b, bank) = fixture();
        let curves = subset_curve(bank, b, &[8, 10], 12, 5, 0, SelectionScore::Refit).unwrap();
        let pts = curve_points(&curves);
        assert_eq!(pts.len(), 5 + 3);
        assert_eq!(pts[5].h, 10);
        assert_eq!(curves[1].error_at(11), Some(pts[6].error));
    }

    #[test]
    fn rejects_oversized_target() {
        let (b, bank) = fixture();
        assert!(subset_curve(bank, b, &[8], bank.size() + 1, 5, 0, SelectionScore::Refit).is_err());
        assert!(subset_curve(bank, b, &[20], 10, 5, 0, SelectionScore::Refit).is_err());
    }
}
