//! Learning a high-memory symmetric system: gradient descent on diagonal
//! LDS parameters against STU training followed by distillation.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spectralds::distill::{build_pair_bank, distill_stu_model, practical_distill, BankFit, PracticalConfig};
use spectralds::rng;
use spectralds::stu::{lds_batch, mse, Batch, Parametrization, StuTrainer};
use spectralds::{AlphaSampler, DiagonalLds, DistilledFilters, NoiseSpec, Optimizer, SpectralBasis, StuParams};

use crate::config::ExperimentConfig;
use crate::record::RunRecord;
use crate::Result;

pub const ADAGRAD_EPS: f64 = 1e-8;

/// A baseline loss above this multiple of its first loss counts as divergence.
pub const RUNAWAY_FACTOR: f64 = 1e6;

/// Held-out evaluation batch index, disjoint from training steps.
const EVAL_STEP: u64 = u64::MAX;

fn normal(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Symmetric system with i.i.d. standard normal `A`, `B`, `C`, `A`
/// symmetrised and rescaled to spectral radius `1 - delta`, returned in its
/// eigenbasis. `C` is then scaled so that, under unit white-noise input, the
/// mean output variance at step `seq_len` is 1.
pub fn symmetric_system(d_in: usize, d_h: usize, d_out: usize, delta: f64, seq_len: usize, seed: u64) -> Result<DiagonalLds> {
    let mut r = rng::stream(seed, "synth-system");
    let a = DMatrix::from_fn(d_h, d_h, |_, _| normal(&mut r));
    let b = DMatrix::from_fn(d_h, d_in, |_, _| normal(&mut r));
    let c = DMatrix::from_fn(d_out, d_h, |_, _| normal(&mut r));
    let eig = SymmetricEigen::new((&a + a.transpose()) * 0.5);
    let radius = eig.eigenvalues.amax();
    let alpha: Vec<f64> = eig.eigenvalues.iter().map(|l| (l / radius * (1.0 - delta)).clamp(-1.0, 1.0)).collect();
    let q = eig.eigenvectors;
    let b = q.tr_mul(&b);
    let c = c * q;
    let raw = DiagonalLds::new(alpha.clone(), b.clone(), c.clone())?;
    let energy = raw.impulse_response(seq_len).as_slice().iter().map(|v| v * v).sum::<f64>() / d_out as f64;
    Ok(DiagonalLds::new(alpha, b, c / energy.sqrt())?)
}

/// Diagonal LDS trained by full backpropagation through time, with `alpha`
/// clamped to `[-1, 1]` after every step.
#[derive(Debug, Clone)]
pub struct LdsLearner {
    alpha: Vec<f64>,
    /// `h x n`, row-major.
    b: Vec<f64>,
    /// `m x h`, row-major.
    c: Vec<f64>,
    n: usize,
    m: usize,
}

#[derive(Debug, Clone)]
struct Grad {
    alpha: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    sq: f64,
}

impl Grad {
    fn zeros(h: usize, n: usize, m: usize) -> Self {
        Self {
            alpha: vec![0.0; h],
            b: vec![0.0; h * n],
            c: vec![0.0; m * h],
            sq: 0.0,
        }
    }

    fn add(mut self, o: &Grad) -> Self {
        for (a, b) in [(&mut self.alpha, &o.alpha), (&mut self.b, &o.b), (&mut self.c, &o.c)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.sq += o.sq;
        self
    }
}

impl LdsLearner {
    /// `alpha ~ U(-1, 1)`, `B ~ N(0, 1/n)`, `C ~ N(0, 0.01/h)`.
    pub fn init(h: usize, n: usize, m: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "lds-learner-init");
        let alpha = (0..h).map(|_| r.random_range(-1.0..1.0)).collect();
        let b = (0..h * n).map(|_| normal(&mut r) / (n as f64).sqrt()).collect();
        let c = (0..m * h).map(|_| 0.1 * normal(&mut r) / (h as f64).sqrt()).collect();
        Self { alpha, b, c, n, m }
    }

    pub fn state_dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn to_lds(&self) -> Result<DiagonalLds> {
        let h = self.state_dim();
        Ok(DiagonalLds::new(
            self.alpha.clone(),
            DMatrix::from_row_slice(h, self.n, &self.b),
            DMatrix::from_row_slice(self.m, h, &self.c),
        )?)
    }

    /// Gradient of the summed squared error on one `T x n` sequence, scaled
    /// by `scale`.
    fn sequence_grad(&self, u: &DMatrix<f64>, target: &DMatrix<f64>, scale: f64) -> Grad {
        let (h, n, m, t_len) = (self.state_dim(), self.n, self.m, u.nrows());
        let mut xs = vec![0.0; t_len * h];
        let mut res = vec![0.0; t_len * m];
        let mut g = Grad::zeros(h, n, m);
        let mut prev = vec![0.0; h];
        for t in 0..t_len {
            let x = &mut xs[t * h..(t + 1) * h];
            for i in 0..h {
                let mut acc = self.alpha[i] * prev[i];
                for c in 0..n {
                    acc += self.b[i * n + c] * u[(t, c)];
                }
                x[i] = acc;
            }
            for o in 0..m {
                let y: f64 = self.c[o * h..(o + 1) * h].iter().zip(x.iter()).map(|(a, b)| a * b).sum();
                let r = y - target[(t, o)];
                res[t * m + o] = r;
                g.sq += r * r;
            }
            prev.copy_from_slice(x);
        }
        let mut carry = vec![0.0; h];
        for t in (0..t_len).rev() {
            let x = &xs[t * h..(t + 1) * h];
            let r = &res[t * m..(t + 1) * m];
            for (o, &ro) in r.iter().enumerate() {
                let s = scale * ro;
                for (gc, &xi) in g.c[o * h..(o + 1) * h].iter_mut().zip(x) {
                    *gc += s * xi;
                }
            }
            for i in 0..h {
                let mut a = self.alpha[i] * carry[i];
                for (o, &ro) in r.iter().enumerate() {
                    a += scale * self.c[o * h + i] * ro;
                }
                carry[i] = a;
                if t > 0 {
                    g.alpha[i] += a * xs[(t - 1) * h + i];
                }
                for c in 0..n {
                    g.b[i * n + c] += a * u[(t, c)];
                }
            }
        }
        g
    }

    fn grad(&self, batch: &Batch) -> Grad {
        let count = batch.inputs.iter().map(|u| u.nrows() * self.m).sum::<usize>() as f64;
        let parts: Vec<Grad> = batch
            .inputs
            .par_iter()
            .zip(&batch.targets)
            .map(|(u, y)| self.sequence_grad(u, y, 2.0 / count))
            .collect();
        let (h, n, m) = (self.state_dim(), self.n, self.m);
        let mut total = parts.iter().fold(Grad::zeros(h, n, m), |acc, g| acc.add(g));
        total.sq /= count;
        total
    }

    /// Mean squared error on `batch`.
    pub fn loss(&self, batch: &Batch) -> f64 {
        self.grad(batch).sq
    }

    /// One plain gradient step; returns the pre-step loss.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> f64 {
        let g = self.grad(batch);
        for (p, d) in self.alpha.iter_mut().zip(&g.alpha) {
            *p = (*p - lr * d).clamp(-1.0, 1.0);
        }
        for (p, d) in self.b.iter_mut().zip(&g.b).chain(self.c.iter_mut().zip(&g.c)) {
            *p -= lr * d;
        }
        g.sq
    }

    #[cfg(test)]
    fn params_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.alpha, &mut self.b, &mut self.c]
    }
}

/// Running mean of STU coefficients.
#[derive(Debug, Clone)]
struct TailAverage {
    plus: Vec<DMatrix<f64>>,
    minus: Vec<DMatrix<f64>>,
    count: usize,
}

impl TailAverage {
    fn new(like: &StuParams) -> Self {
        Self {
            plus: like.m_plus().iter().map(|m| m * 0.0).collect(),
            minus: like.m_minus().iter().map(|m| m * 0.0).collect(),
            count: 0,
        }
    }

    fn add(&mut self, p: &StuParams) {
        for (a, b) in self.plus.iter_mut().zip(p.m_plus()).chain(self.minus.iter_mut().zip(p.m_minus())) {
            *a += b;
        }
        self.count += 1;
    }

    fn mean(&self) -> Result<StuParams> {
        let s = 1.0 / self.count.max(1) as f64;
        Ok(StuParams::new(
            self.plus.iter().map(|m| m * s).collect(),
            self.minus.iter().map(|m| m * s).collect(),
            None,
        )?)
    }
}

/// Basis and distilled filters shared by every treatment run.
#[derive(Debug, Clone)]
pub struct SynthSetup {
    pub basis: SpectralBasis,
    pub filters: DistilledFilters,
}

impl SynthSetup {
    /// Basis of length `seq_len`, distilled through a positive-alpha bank
    /// to `distill_h` states.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let basis = spectralds::compute_basis(spectralds::HankelSpec::new(cfg.seq_len)?, cfg.k)?;
        let bank = build_pair_bank(&basis, cfg.bank_size, &AlphaSampler::new(cfg.seed), f64::INFINITY, &BankFit::Joint)?;
        let h_start = cfg.k.min(cfg.distill_h);
        let d = practical_distill(&bank, &basis, &PracticalConfig::new(h_start, cfg.distill_h, cfg.trials, cfg.seed))?;
        Ok(Self {
            basis,
            filters: d.filters,
        })
    }
}

/// Outcome of one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPair {
    pub baseline: RunRecord,
    pub treatment: RunRecord,
}

impl SynthPair {
    /// Held-out MSE of the baseline; infinite when it diverged.
    pub fn baseline_mse(&self) -> f64 {
        self.baseline.metric("final_mse").unwrap_or(f64::INFINITY)
    }

    /// Held-out MSE of the distilled treatment model.
    pub fn treatment_mse(&self) -> f64 {
        self.treatment.metric("distilled_mse").unwrap_or(f64::INFINITY)
    }
}

fn noise_for(cfg: &ExperimentConfig, seed: u64) -> Option<NoiseSpec> {
    cfg.noise.then(|| NoiseSpec::preset(rng::stream_seed(seed, "synth-noise")))
}

fn batch_for(truth: &DiagonalLds, cfg: &ExperimentConfig, seed: u64, step: u64) -> Result<Batch> {
    let noise = if step == EVAL_STEP { None } else { noise_for(cfg, seed) };
    Ok(lds_batch(truth, seed, step, cfg.batch, cfg.seq_len, 1.0, noise)?)
}

/// Baseline arm: plain gradient descent on `(alpha, B, C)`.
pub fn run_baseline(truth: &DiagonalLds, cfg: &ExperimentConfig, rep: usize, seed: u64) -> Result<RunRecord> {
    let mut rec = RunRecord::new("lds_gd", rep, seed, cfg);
    rec.note("optimizer", format!("gd(lr={}), alpha clamped to [-1, 1]", cfg.lr_baseline));
    let mut learner = LdsLearner::init(cfg.d_h, truth.input_dim(), truth.output_dim(), seed);
    let started = Instant::now();
    let mut first = None;
    for s in 0..cfg.steps {
        let batch = batch_for(truth, cfg, seed, s as u64)?;
        let loss = learner.step(&batch, cfg.lr_baseline);
        let first = *first.get_or_insert(loss);
        if !rec.push_step(loss, started) {
            break;
        }
        if loss > RUNAWAY_FACTOR * first {
            rec.mark_diverged();
            break;
        }
    }
    if !rec.diverged() {
        let eval = batch_for(truth, cfg, seed, EVAL_STEP)?;
        let l = learner.loss(&eval);
        if l.is_finite() {
            rec.set_metric("final_mse", l);
        } else {
            rec.mark_diverged();
        }
    }
    Ok(rec)
}

/// Treatment arm: AdaGrad STU training in whitened coordinates with tail
/// iterate averaging, then the convolution is replaced by the distilled
/// recurrence.
pub fn run_treatment(truth: &DiagonalLds, setup: &SynthSetup, cfg: &ExperimentConfig, rep: usize, seed: u64) -> Result<RunRecord> {
    let mut rec = RunRecord::new("stu_distill", rep, seed, cfg);
    rec.note(
        "optimizer",
        format!(
            "adagrad(lr={}, eps={ADAGRAD_EPS}, zero accumulator) on whitened coefficients; \
             iterates averaged over the second half of training",
            cfg.lr_stu
        ),
    );
    let init = StuParams::zeros(setup.basis.k(), truth.output_dim(), truth.input_dim());
    let mut trainer = StuTrainer::new(&setup.basis, cfg.seq_len, &init, Parametrization::Whitened)?;
    let opt = Optimizer::AdaGrad { eps: ADAGRAD_EPS };
    let tail_start = cfg.steps / 2;
    let mut avg = TailAverage::new(&init);
    let started = Instant::now();
    for s in 0..cfg.steps {
        let batch = batch_for(truth, cfg, seed, s as u64)?;
        let loss = trainer.step(&batch, cfg.lr_stu, opt)?;
        if !rec.push_step(loss, started) {
            break;
        }
        if s >= tail_start {
            avg.add(&trainer.params());
        }
    }
    if rec.diverged() {
        return Ok(rec);
    }
    let eval = batch_for(truth, cfg, seed, EVAL_STEP)?;
    rec.set_metric("stu_last_mse", trainer.loss(&eval)?);
    let params = avg.mean()?;
    let preds = eval
        .inputs
        .iter()
        .map(|u| params.forward_nonar(&setup.basis, u))
        .collect::<spectralds::Result<Vec<_>>>()?;
    rec.set_metric("stu_mse", mse(&preds, &eval.targets));
    let t0 = Instant::now();
    let mut model = distill_stu_model(&params, &setup.filters)?;
    let preds = eval
        .inputs
        .iter()
        .map(|u| {
            model.reset();
            model.run(u)
        })
        .collect::<spectralds::Result<Vec<_>>>()?;
    rec.set_metric("distilled_mse", mse(&preds, &eval.targets));
    rec.set_metric("distilled_eval_seconds", t0.elapsed().as_secs_f64());
    rec.set_metric("filter_error", setup.filters.error_fro());
    rec.set_metric("distilled_h", setup.filters.h() as f64);
    Ok(rec)
}

/// Both arms for each repetition under the same batch schedule; repetition
/// `r` uses seed `cfg.seed + r` for the target system and the data.
pub fn synth_compare(cfg: &ExperimentConfig, setup: &SynthSetup) -> Result<Vec<SynthPair>> {
    cfg.validate()?;
    (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| {
            let seed = cfg.seed.wrapping_add(rep as u64);
            let truth = symmetric_system(cfg.d_in, cfg.d_h, cfg.d_out, cfg.delta, cfg.seq_len, seed)?;
            let baseline = run_baseline(&truth, cfg, rep, seed)?;
            let treatment = run_treatment(&truth, setup, cfg, rep, seed)?;
            Ok(SynthPair { baseline, treatment })
        })
        .collect()
}
