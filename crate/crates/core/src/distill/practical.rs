use nalgebra::DMatrix;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DistilledFilters, PairBank};
use crate::error::{ensure, ensure_dims, Error, Result};
use crate::linalg::{pinv, PINV_RCOND};
use crate::rng;
use crate::spectral_basis::SpectralBasis;

/// How candidate subsets are scored during selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionScore {
    /// Best achievable error `min_M ||Phi - M Psi_S||_F` (projection onto the
    /// span of the selected impulses).
    Refit,
    /// Error of the coefficient pseudoinverse `||Phi - Theta_S^+ Psi_S||_F`.
    Pseudoinverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub lr: f64,
    pub max_steps: usize,
    /// Stop once the loss improves by less than this fraction over `window`
    /// accepted steps.
    pub rel_tol: f64,
    pub window: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            lr: 0.25,
            max_steps: 10_000,
            rel_tol: 1e-10,
            window: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PracticalConfig {
    pub h_start: usize,
    pub h: usize,
    pub trials: usize,
    pub seed: u64,
    pub score: SelectionScore,
    /// Candidates whose component outside the selected span is below this
    /// fraction of their norm are skipped.
    pub min_novelty: f64,
    pub finetune: FineTuneConfig,
}

impl PracticalConfig {
    pub fn new(h_start: usize, h: usize, trials: usize, seed: u64) -> Self {
        Self {
            h_start,
            h,
            trials,
            seed,
            score: SelectionScore::Refit,
            min_novelty: 1e-12,
            finetune: FineTuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Bank rows in selection order.
    pub indices: Vec<usize>,
    /// Score of every trial subset.
    pub trial_errors: Vec<f64>,
    /// Error at sizes `h_start ..= h`.
    pub curve: Vec<f64>,
    /// Greedy steps that found no improving row.
    pub stalled_steps: usize,
}

#[derive(Debug, Clone)]
pub struct PracticalDistillation {
    pub filters: DistilledFilters,
    pub selection: Selection,
    /// `||Phi - Theta_S^+ Psi_S||_F` before fine-tuning.
    pub pinv_error: f64,
    /// `||Phi - M Psi_S||_F` after fine-tuning.
    pub final_error: f64,
    pub losses: Vec<f64>,
    /// Rows removed for numerical dependence before fine-tuning.
    pub dropped: Vec<usize>,
}

impl PracticalDistillation {
    pub fn improvement(&self) -> f64 {
        self.pinv_error / self.final_error
    }
}

fn validate(bank: &PairBank, basis: &SpectralBasis, cfg: &PracticalConfig) -> Result<()> {
    ensure_dims(bank.len() == basis.len() && bank.k() == basis.k(), || {
        format!(
            "bank is L={} k={}, basis is L={} k={}",
            bank.len(),
            bank.k(),
            basis.len(),
            basis.k()
        )
    })?;
    ensure(cfg.h_start >= 1 && cfg.h_start <= cfg.h, || {
        format!("need 1 <= h_start ({}) <= h ({})", cfg.h_start, cfg.h)
    })?;
    ensure(cfg.h <= bank.size(), || format!("h = {} exceeds the {} bank rows", cfg.h, bank.size()))?;
    ensure(cfg.trials >= 1, || "trials must be positive".into())
}

fn columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

/// `x - Q Q^T x`, applied twice.
fn deflate(q: &DMatrix<f64>, x: &mut DMatrix<f64>) {
    if q.ncols() == 0 {
        return;
    }
    for _ in 0..2 {
        let c = q.tr_mul(x);
        x.gemm(-1.0, q, &c, 1.0);
    }
}

/// Incremental projection residual of `Phi` against the selected span.
struct RefitState {
    q: DMatrix<f64>,
    residual: DMatrix<f64>,
    perp: DMatrix<f64>,
    perp_norm2: Vec<f64>,
    psi_norm2: Vec<f64>,
}

impl RefitState {
    fn new(bank: &PairBank, phi: &DMatrix<f64>, subset: &[usize]) -> Self {
        let q = orthonormal(&columns(bank.psi_columns(), subset));
        let mut residual = phi.clone();
        deflate(&q, &mut residual);
        let mut perp = bank.psi_columns().clone();
        deflate(&q, &mut perp);
        let perp_norm2 = perp.column_iter().map(|c| c.norm_squared()).collect();
        let psi_norm2 = bank.psi_columns().column_iter().map(|c| c.norm_squared()).collect();
        Self {
            q,
            residual,
            perp,
            perp_norm2,
            psi_norm2,
        }
    }

    fn error(&self) -> f64 {
        self.residual.norm()
    }

    /// Error reduction (squared) per candidate; `None` when ineligible.
    fn gains(&self, taken: &[bool], novelty: f64) -> Vec<Option<f64>> {
        let proj = self.residual.tr_mul(&self.perp);
        (0..self.perp.ncols())
            .map(|i| {
                let p2 = self.perp_norm2[i];
                if taken[i] || p2 <= novelty * novelty * self.psi_norm2[i] || p2 == 0.0 {
                    None
                } else {
                    Some(proj.column(i).norm_squared() / p2)
                }
            })
            .collect()
    }

    fn add(&mut self, i: usize) {
        let mut q = self.perp.columns(i, 1).into_owned();
        deflate(&self.q, &mut q);
        let n = q.norm();
        if n == 0.0 {
            return;
        }
        q /= n;
        let c = q.tr_mul(&self.residual);
        self.residual.gemm(-1.0, &q, &c, 1.0);
        let c = q.tr_mul(&self.perp);
        self.perp.gemm(-1.0, &q, &c, 1.0);
        for (j, col) in self.perp.column_iter().enumerate() {
            self.perp_norm2[j] = col.norm_squared();
        }
        let s = self.q.ncols();
        self.q = self.q.clone().insert_column(s, 0.0);
        self.q.column_mut(s).copy_from(&q);
    }
}

fn orthonormal(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.ncols() == 0 {
        return DMatrix::zeros(a.nrows(), 0);
    }
    a.clone().qr().q()
}

/// Pseudoinverse-score evaluation through Gram quantities.
struct PinvScorer {
    /// `<phi_j, psi_i>`, `k x N`.
    cross: DMatrix<f64>,
    phi_norm2: f64,
}

impl PinvScorer {
    fn new(bank: &PairBank, phi: &DMatrix<f64>) -> Self {
        Self {
            cross: phi.tr_mul(bank.psi_columns()),
            phi_norm2: phi.norm_squared(),
        }
    }

    /// Error for `subset`, with `gram` the `|S| x |S|` impulse Gram matrix.
    fn error(&self, bank: &PairBank, subset: &[usize], gram: &DMatrix<f64>) -> f64 {
        let theta_rows = columns(bank.theta_columns(), subset).transpose();
        let p = match pinv(&theta_rows, PINV_RCOND) {
            Ok((p, _, _)) => p,
            Err(_) => return f64::INFINITY,
        };
        let quad = (&p * gram * p.transpose()).trace();
        let cs = columns(&self.cross, subset);
        let lin = p.component_mul(&cs).sum();
        (quad - 2.0 * lin + self.phi_norm2).max(0.0).sqrt()
    }
}

fn gram(bank: &PairBank, subset: &[usize]) -> DMatrix<f64> {
    let a = columns(bank.psi_columns(), subset);
    a.tr_mul(&a)
}

fn subset_error(bank: &PairBank, phi: &DMatrix<f64>, subset: &[usize], score: SelectionScore, scorer: Option<&PinvScorer>) -> f64 {
    match score {
        SelectionScore::Refit => {
            let q = orthonormal(&columns(bank.psi_columns(), subset));
            let mut r = phi.clone();
            deflate(&q, &mut r);
            r.norm()
        }
        SelectionScore::Pseudoinverse => scorer
            .expect("pseudoinverse scorer")
            .error(bank, subset, &gram(bank, subset)),
    }
}

/// Picks the best random subset, then grows it greedily to `cfg.h` rows.
pub fn select_rows(bank: &PairBank, basis: &SpectralBasis, cfg: &PracticalConfig) -> Result<Selection> {
    validate(bank, basis, cfg)?;
    let phi = basis.phi();
    let n = bank.size();
    let scorer = matches!(cfg.score, SelectionScore::Pseudoinverse).then(|| PinvScorer::new(bank, phi));
    let trials: Vec<(Vec<usize>, f64)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::substream(cfg.seed, "subset-trial", t as u64);
            let mut subset = index::sample(&mut r, n, cfg.h_start).into_vec();
            subset.sort_unstable();
            let err = subset_error(bank, phi, &subset, cfg.score, scorer.as_ref());
            (subset, err)
        })
        .collect();
    let trial_errors: Vec<f64> = trials.iter().map(|(_, e)| *e).collect();
    let best = (0..trials.len())
        .min_by(|&a, &b| trial_errors[a].total_cmp(&trial_errors[b]).then(a.cmp(&b)))
        .expect("at least one trial");
    let mut indices = trials[best].0.clone();
    let mut taken = vec![false; n];
    for &i in &indices {
        taken[i] = true;
    }
    let mut curve = vec![trial_errors[best]];
    let mut stalled_steps = 0;

    match cfg.score {
        SelectionScore::Refit => {
            let mut state = RefitState::new(bank, phi, &indices);
            curve[0] = state.error();
            while indices.len() < cfg.h {
                let gains = state.gains(&taken, cfg.min_novelty);
                let pick = argmax(&gains).or_else(|| {
                    log::warn!("no candidate adds a new direction; taking the lowest free row");
                    taken.iter().position(|t| !t)
                });
                let Some(i) = pick else { break };
                if gains[i].unwrap_or(0.0) <= 0.0 {
                    stalled_steps += 1;
                }
                state.add(i);
                taken[i] = true;
                indices.push(i);
                curve.push(state.error());
            }
        }
        SelectionScore::Pseudoinverse => {
            let scorer = scorer.as_ref().expect("pseudoinverse scorer");
            let psi = bank.psi_columns();
            let mut rows = columns(psi, &indices).tr_mul(psi);
            let norms: Vec<f64> = psi.column_iter().map(|c| c.norm_squared()).collect();
            while indices.len() < cfg.h {
                let s = indices.len();
                let current = *curve.last().expect("curve");
                let errors: Vec<Option<f64>> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        if taken[i] {
                            return None;
                        }
                        let mut g = DMatrix::zeros(s + 1, s + 1);
                        for a in 0..s {
                            for b in 0..s {
                                g[(a, b)] = rows[(a, indices[b])];
                            }
                            g[(a, s)] = rows[(a, i)];
                            g[(s, a)] = rows[(a, i)];
                        }
                        g[(s, s)] = norms[i];
                        let mut subset = indices.clone();
                        subset.push(i);
                        Some(-scorer.error(bank, &subset, &g))
                    })
                    .collect();
                let Some(i) = argmax(&errors) else { break };
                let err = -errors[i].expect("picked candidate");
                if err >= current {
                    stalled_steps += 1;
                }
                taken[i] = true;
                indices.push(i);
                let new_row = psi.column(i).transpose() * psi;
                rows = rows.insert_row(s, 0.0);
                rows.row_mut(s).copy_from(&new_row);
                curve.push(err);
            }
        }
    }
    Ok(Selection {
        indices,
        trial_errors,
        curve,
        stalled_steps,
    })
}

/// Largest value, ties to the lowest index.
fn argmax(values: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = *v {
            if v.is_finite() && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Selection, pseudoinverse initialisation and gradient fine-tuning of the
/// mixing weights. Returned filters fold the row scales `c_i b_i / (1 - a_i)`
/// into `mtilde` so they mix unit-gain geometric filters.
pub fn practical_distill(bank: &PairBank, basis: &SpectralBasis, cfg: &PracticalConfig) -> Result<PracticalDistillation> {
    let selection = select_rows(bank, basis, cfg)?;
    let (indices, dropped) = independent_rows(bank, &selection.indices);
    let phi = basis.phi();
    let theta_rows = columns(bank.theta_columns(), &indices).transpose();
    let (init, _, _) = pinv(&theta_rows, PINV_RCOND)?;
    let psi_sub = columns(bank.psi_columns(), &indices);
    let pinv_error = (phi - &psi_sub * init.transpose()).norm();
    let (mixing, losses) = finetune(&psi_sub, phi, &init, &cfg.finetune)?;
    let final_error = (phi - &psi_sub * mixing.transpose()).norm();

    let triples = bank.triples();
    let alphas: Vec<f64> = indices.iter().map(|&i| triples[i].a).collect();
    let mut folded = mixing;
    for (col, &i) in indices.iter().enumerate() {
        let t = triples[i];
        folded.column_mut(col).scale_mut(t.c * t.b / (1.0 - t.a));
    }
    let filters = DistilledFilters::new(basis, alphas, folded, None)?;
    Ok(PracticalDistillation {
        filters,
        selection,
        pinv_error,
        final_error,
        losses,
        dropped,
    })
}

/// Removes rows whose impulses are numerically dependent on earlier ones.
fn independent_rows(bank: &PairBank, indices: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    let mut q = DMatrix::zeros(bank.len(), 0);
    for &i in indices {
        let psi = bank.impulse(i);
        let norm = psi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = DMatrix::from_column_slice(psi.len(), 1, psi);
        deflate(&q, &mut v);
        let rest = v.norm();
        if norm == 0.0 || rest <= 1e-14 * norm || bank.triples()[i].a >= 1.0 {
            log::warn!("dropping bank row {i}: dependent on the rows already selected");
            dropped.push(i);
            continue;
        }
        v /= rest;
        let s = q.ncols();
        q = q.insert_column(s, 0.0);
        q.column_mut(s).copy_from(&v);
        kept.push(i);
    }
    (kept, dropped)
}

/// Gradient descent on `||Phi - Psi_S M^T||_F^2` in the coordinates
/// `Y = R M^T` of a thin QR `Psi_S = Q R`, where the loss separates into
/// `||Phi - Q Q^T Phi||^2 + ||Q^T Phi - Y||^2`. Steps halve on increase.
fn finetune(psi_sub: &DMatrix<f64>, phi: &DMatrix<f64>, init: &DMatrix<f64>, cfg: &FineTuneConfig) -> Result<(DMatrix<f64>, Vec<f64>)> {
    ensure(cfg.lr > 0.0 && cfg.window >= 1, || "invalid fine-tuning settings".into())?;
    let qr = psi_sub.clone().qr();
    let (q, r) = (qr.q(), qr.r());
    let mut target = q.tr_mul(phi);
    let mut resid = phi - &q * &target;
    let fix = q.tr_mul(&resid);
    target += &fix;
    resid -= &q * fix;
    let floor = resid.norm_squared();
    let mut y = &r * init.transpose();
    let loss_of = |y: &DMatrix<f64>| floor + (&target - y).norm_squared();
    let mut losses = vec![loss_of(&y)];
    let mut lr = cfg.lr;
    for step in 0..cfg.max_steps {
        let current = *losses.last().expect("loss");
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &y + (&target - &y) * (2.0 * lr);
            let l = loss_of(&cand);
            if !l.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: l,
                    best: current,
                });
            }
            if l <= current {
                accepted = Some((cand, l));
                break;
            }
            lr *= 0.5;
        }
        let Some((cand, l)) = accepted else { break };
        y = cand;
        losses.push(l);
        let s = losses.len() - 1;
        if s >= cfg.window {
            let past = losses[s - cfg.window];
            if past - l <= cfg.rel_tol * past {
                break;
            }
        }
    }
    let mt = r
        .solve_upper_triangular(&y)
        .ok_or_else(|| Error::RankDeficient("selected impulses are dependent".into()))?;
    Ok((mt.transpose(), losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{build_pair_bank, AlphaSampler, BankFit, BankRow, SystemTriple};
    use crate::spectral_basis::{compute_basis, HankelSpec};
    use std::sync::OnceLock;

    fn basis_512_8() -> &'static SpectralBasis {
        static B: OnceLock<SpectralBasis> = OnceLock::new();
        B.get_or_init(|| compute_basis(HankelSpec::new(512).unwrap(), 8).unwrap())
    }

    fn bank_512_8() -> &'static PairBank {
        static B: OnceLock<PairBank> = OnceLock::new();
        B.get_or_init(|| build_pair_bank(basis_512_8(), 600, &AlphaSampler::new(1).signed(), f64::INFINITY, &BankFit::Joint).unwrap())
    }

    fn exact_bank(basis: &SpectralBasis) -> PairBank {
        let k = basis.k();
        let rows = (0..k)
            .map(|j| {
                let mut theta = vec![0.0; k];
                theta[j] = 1.0;
                BankRow {
                    triple: SystemTriple { a: 0.5, b: 1.0, c: 1.0 },
                    psi: basis.filter(j).to_vec(),
                    theta,
                    theta_minus: vec![0.0; k],
                    fit_error: 0.0,
                }
            })
            .collect();
        PairBank::from_rows(rows, basis.len(), k, 0.0, k).unwrap()
    }

    #[test]
    fn exact_rows_reconstruct_without_error() {
        let basis = basis_512_8();
        let bank = exact_bank(basis);
        for score in [SelectionScore::Refit, SelectionScore::Pseudoinverse] {
            let cfg = PracticalConfig {
                score,
                ..PracticalConfig::new(8, 8, 1, 0)
            };
            let sel = select_rows(&bank, basis, &cfg).unwrap();
            assert_eq!(sel.curve.len(), 1);
            assert!(sel.curve[0] < 1e-7, "{score:?}: {}", sel.curve[0]);
        }
    }

    #[test]
    fn refit_curve_is_non_increasing() {
        let cfg = PracticalConfig::new(8, 30, 20, 3);
        let sel = select_rows(bank_512_8(), basis_512_8(), &cfg).unwrap();
        assert_eq!(sel.curve.len(), 30 - 8 + 1);
        for w in sel.curve.windows(2) {
            assert!(w[1] <= w[0], "{:?}", sel.curve);
        }
        let mut seen = sel.indices.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 30);
    }

    #[test]
    fn pseudoinverse_increases_are_counted_as_stalls() {
        let cfg = PracticalConfig {
            score: SelectionScore::Pseudoinverse,
            ..PracticalConfig::new(8, 16, 10, 3)
        };
        let sel = select_rows(bank_512_8(), basis_512_8(), &cfg).unwrap();
        let rises = sel.curve.windows(2).filter(|w| w[1] >= w[0]).count();
        assert_eq!(rises, sel.stalled_steps);
        let best = sel.trial_errors.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(sel.curve[0], best);
    }

    #[test]
    fn best_trial_beats_typical_random_subset() {
        let cfg = PracticalConfig::new(12, 12, 40, 9);
        let sel = select_rows(bank_512_8(), basis_512_8(), &cfg).unwrap();
        let mut errs = sel.trial_errors.clone();
        errs.sort_by(f64::total_cmp);
        assert!(sel.curve[0] <= errs[errs.len() / 2]);
    }

    #[test]
    fn greedy_ties_resolve_to_lowest_index() {
        assert_eq!(argmax(&[Some(1.0), Some(3.0), None, Some(3.0)]), Some(1));
        assert_eq!(argmax(&[None, None]), None);
        assert_eq!(argmax(&[Some(f64::NAN), Some(0.0)]), Some(1));
    }

    #[test]
    fn duplicate_rows_pick_the_first_copy() {
        let basis = basis_512_8();
        let mut rows: Vec<BankRow> = Vec::new();
        let src = bank_512_8();
        for i in [0usize, 1, 2, 3, 4, 5, 6, 7, 9, 9] {
            rows.push(BankRow {
                triple: src.triples()[i],
                psi: src.impulse(i).to_vec(),
                theta: src.theta(i).to_vec(),
                theta_minus: src.theta_minus(i).to_vec(),
                fit_error: src.fit_errors()[i],
            });
        }
        let bank = PairBank::from_rows(rows, basis.len(), basis.k(), f64::INFINITY, 10).unwrap();
        // start from rows 0..8 deterministically by using every row but the pair
        let mut state = RefitState::new(&bank, basis.phi(), &[0, 1, 2, 3, 4, 5, 6, 7]);
        let mut taken = vec![false; 10];
        taken[..8].iter_mut().for_each(|t| *t = true);
        let gains = state.gains(&taken, 1e-12);
        assert_eq!(gains[8], gains[9]);
        assert_eq!(argmax(&gains), Some(8));
        state.add(8);
        taken[8] = true;
        assert!(state.gains(&taken, 1e-12)[9].is_none());
    }

    #[test]
    fn distillation_fits_and_fine_tuning_never_hurts() {
        let cfg = PracticalConfig::new(8, 40, 20, 5);
        let out = practical_distill(bank_512_8(), basis_512_8(), &cfg).unwrap();
        for w in out.losses.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(out.final_error <= out.pinv_error);
        // explicit evaluation of the large mixing weights adds rounding noise
        assert!(out.final_error <= out.selection.curve.last().unwrap() + 1e-7, "{} vs {:?}", out.final_error, out.selection.curve);
        assert!(out.final_error < 1e-4, "final {:e}", out.final_error);
        let (_, fro) = out.filters.errors(basis_512_8()).unwrap();
        assert!((fro - out.filters.error_fro()).abs() <= 1e-12);
        assert!(fro < 1e-3, "deployed error {fro:e}");
        assert_eq!(out.filters.h() + out.dropped.len(), 40);
    }

    #[test]
    fn distillation_is_deterministic() {
        let cfg = PracticalConfig::new(8, 12, 5, 2);
        let a = practical_distill(bank_512_8(), basis_512_8(), &cfg).unwrap();
        let b = practical_distill(bank_512_8(), basis_512_8(), &cfg).unwrap();
        assert_eq!(a.selection, b.selection);
        assert_eq!(a.filters, b.filters);
    }

    #[test]
    fn invalid_sizes_rejected() {
        let bank = bank_512_8();
        let basis = basis_512_8();
        assert!(select_rows(bank, basis, &PracticalConfig::new(9, 8, 1, 0)).is_err());
        assert!(select_rows(bank, basis, &PracticalConfig::new(4, bank.size() + 1, 1, 0)).is_err());
        assert!(select_rows(bank, basis, &PracticalConfig::new(4, 8, 0, 0)).is_err());
    }
}
