//! Autoregressive generation timing: naive convolutional STU against the
//! distilled recurrence. Each step feeds `tanh(y_t)` back as the next input.

use std::hint::black_box;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use spectralds::distill::{distill_with_alphas, distill_stu_model, RecurrentStu};
use spectralds::rng;
use spectralds::spectral_basis::negate_filter;
use spectralds::{compute_basis_with, AlphaSampler, EigenConfig, HankelSpec, SpectralBasis, StuParams};

use crate::{BenchError, Result};

/// Filter length used to build distilled filters for the recurrent model;
/// the recurrence itself has no length limit.
pub const RECURRENT_BASIS_LEN: usize = 1024;

/// STU evaluated by explicit causal sums over the whole history, so step
/// `t` costs `O(k n t)`.
#[derive(Debug, Clone)]
pub struct NaiveConvStu {
    /// Filters reversed in time, each of length `cap`.
    plus_rev: Vec<Vec<f64>>,
    minus_rev: Vec<Vec<f64>>,
    /// `m x (k n)`, column `c k + j` holds `M+_j[:, c]`.
    w_plus: DMatrix<f64>,
    w_minus: DMatrix<f64>,
    /// Input history per channel.
    hist: Vec<Vec<f64>>,
    cap: usize,
}

impl NaiveConvStu {
    pub fn new(params: &StuParams, basis: &SpectralBasis) -> Result<Self> {
        if params.k() != basis.k() {
            return Err(BenchError::Config(format!("parameters use k = {}, basis has {}", params.k(), basis.k())));
        }
        let (k, m, n, cap) = (params.k(), params.outputs(), params.inputs(), basis.len());
        let rev = |v: Vec<f64>| v.into_iter().rev().collect::<Vec<f64>>();
        let plus_rev = (0..k).map(|j| rev(basis.filter(j).to_vec())).collect();
        let minus_rev = (0..k).map(|j| rev(negate_filter(basis.filter(j)))).collect();
        let mut w_plus = DMatrix::zeros(m, k * n);
        let mut w_minus = DMatrix::zeros(m, k * n);
        for j in 0..k {
            for c in 0..n {
                w_plus.column_mut(c * k + j).copy_from(&params.m_plus()[j].column(c));
                w_minus.column_mut(c * k + j).copy_from(&params.m_minus()[j].column(c));
            }
        }
        Ok(Self {
            plus_rev,
            minus_rev,
            w_plus,
            w_minus,
            hist: vec![Vec::with_capacity(cap); n],
            cap,
        })
    }

    pub fn reset(&mut self) {
        self.hist.iter_mut().for_each(Vec::clear);
    }

    pub fn step_into(&mut self, u: &[f64], y: &mut [f64]) -> Result<()> {
        let t = self.hist[0].len();
        if t >= self.cap {
            return Err(BenchError::Config(format!("history exceeds filter length {}", self.cap)));
        }
        for (h, &v) in self.hist.iter_mut().zip(u) {
            h.push(v);
        }
        let k = self.plus_rev.len();
        let start = self.cap - 1 - t;
        y.iter_mut().for_each(|v| *v = 0.0);
        for (c, h) in self.hist.iter().enumerate() {
            for j in 0..k {
                let p = dot(&self.plus_rev[j][start..], h);
                let q = dot(&self.minus_rev[j][start..], h);
                let col = c * k + j;
                for (o, yo) in y.iter_mut().enumerate() {
                    *yo += self.w_plus[(o, col)] * p + self.w_minus[(o, col)] * q;
                }
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-token interface shared by both timed models.
pub trait Generator {
    fn reset(&mut self);
    fn step_into(&mut self, u: &[f64], y: &mut [f64]) -> Result<()>;
}

impl Generator for NaiveConvStu {
    fn reset(&mut self) {
        NaiveConvStu::reset(self)
    }

    fn step_into(&mut self, u: &[f64], y: &mut [f64]) -> Result<()> {
        NaiveConvStu::step_into(self, u, y)
    }
}

impl Generator for RecurrentStu {
    fn reset(&mut self) {
        RecurrentStu::reset(self)
    }

    fn step_into(&mut self, u: &[f64], y: &mut [f64]) -> Result<()> {
        Ok(RecurrentStu::step_into(self, u, y)?)
    }
}

/// Generates `steps` tokens from `u0`; returns elapsed seconds and the last
/// output.
pub fn generate(model: &mut impl Generator, u0: &[f64], steps: usize) -> Result<(f64, Vec<f64>)> {
    model.reset();
    let mut u = u0.to_vec();
    let mut y = vec![0.0; u0.len()];
    let start = Instant::now();
    for _ in 0..steps {
        model.step_into(black_box(&u), &mut y)?;
        for (a, b) in u.iter_mut().zip(&y) {
            *a = b.tanh();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((secs, black_box(y)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    ConvStu,
    RecurrentLds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub model: ModelKind,
    /// Distilled state dimension `h`; zero for the convolutional model.
    pub state_dim: usize,
    pub t: usize,
    pub seconds: f64,
    pub per_token_us: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeDims {
    /// Input and output width; generation feeds outputs back as inputs.
    pub width: usize,
    pub k: usize,
    /// Timed runs per point; the minimum is reported.
    pub repeats: usize,
}

fn random_params(dims: &RuntimeDims, seed: u64) -> StuParams {
    let scale = 1.0 / ((dims.k * dims.width) as f64).sqrt();
    StuParams::random(dims.k, dims.width, dims.width, scale, &mut rng::stream(seed, "runtime-params"))
}

fn time_model(model: &mut impl Generator, t: usize, dims: &RuntimeDims, u0: &[f64]) -> Result<f64> {
    // Untimed warm-up over a short prefix.
    generate(model, u0, t.min(1024))?;
    let mut best = f64::INFINITY;
    for _ in 0..dims.repeats.max(1) {
        best = best.min(generate(model, u0, t)?.0);
    }
    Ok(best)
}

/// Times generation for every `T` in `t_values`. The recurrent model is
/// timed at each entry of `state_dims`. Setup (basis, distillation) is not
/// timed.
pub fn runtime_bench(t_values: &[usize], models: &[ModelKind], state_dims: &[usize], dims: &RuntimeDims, seed: u64) -> Result<Vec<TimingRow>> {
    if t_values.is_empty() || t_values.contains(&0) || t_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BenchError::Config("T values must be positive and ascending".into()));
    }
    if dims.width == 0 || dims.k == 0 {
        return Err(BenchError::Config("width and k must be positive".into()));
    }
    let params = random_params(dims, seed);
    let mut r = rng::stream(seed, "runtime-u0");
    let u0: Vec<f64> = (0..dims.width).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
    let mut rows = Vec::new();
    for &kind in models {
        match kind {
            ModelKind::ConvStu => {
                let t_max = *t_values.last().expect("non-empty");
                // Refinement only sharpens trailing filters and costs O(L^2);
                // timing does not depend on filter accuracy.
                let cfg = EigenConfig {
                    refine_iters: 0,
                    ..EigenConfig::default()
                };
                let basis = compute_basis_with(HankelSpec::new(t_max)?, dims.k, &cfg)?;
                let mut model = NaiveConvStu::new(&params, &basis)?;
                for &t in t_values {
                    let secs = time_model(&mut model, t, dims, &u0)?;
                    rows.push(row(kind, 0, t, secs));
                }
            }
            ModelKind::RecurrentLds => {
                let basis = spectralds::compute_basis(HankelSpec::new(RECURRENT_BASIS_LEN)?, dims.k)?;
                for &h in state_dims {
                    let alphas = AlphaSampler::new(seed).sample_distinct(h, "runtime-alphas")?;
                    let filters = distill_with_alphas(&basis, alphas)?.filters;
                    let mut model = distill_stu_model(&params, &filters)?;
                    for &t in t_values {
                        let secs = time_model(&mut model, t, dims, &u0)?;
                        rows.push(row(kind, h, t, secs));
                    }
                }
            }
        }
    }
    Ok(rows)
}

fn row(model: ModelKind, state_dim: usize, t: usize, seconds: f64) -> TimingRow {
    TimingRow {
        model,
        state_dim,
        t,
        seconds,
        per_token_us: seconds / t as f64 * 1e6,
    }
}

/// `time(T_{i+1}) / time(T_i)` for one model and state dimension.
pub fn scaling_ratios(rows: &[TimingRow], model: ModelKind, state_dim: usize) -> Vec<f64> {
    let pts: Vec<&TimingRow> = rows.iter().filter(|r| r.model == model && r.state_dim == state_dim).collect();
    pts.windows(2).map(|w| w[1].seconds / w[0].seconds).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use spectralds::compute_basis;

    #[test]
    fn naive_conv_matches_forward() {
        let basis = compute_basis(HankelSpec::new(64).unwrap(), 5).unwrap();
        let params = StuParams::random(5, 3, 3, 0.7, &mut rng::stream(1, "t"));
        let mut r = rng::stream(2, "u");
        let u = DMatrix::from_fn(64, 3, |_, _| rand::Rng::random_range(&mut r, -1.0..1.0));
        let expect = params.forward_nonar(&basis, &u).unwrap();
        let mut model = NaiveConvStu::new(&params, &basis).unwrap();
        let mut y = vec![0.0; 3];
        for t in 0..64 {
            let ut: Vec<f64> = (0..3).map(|c| u[(t, c)]).collect();
            model.step_into(&ut, &mut y).unwrap();
            for o in 0..3 {
                assert!((y[o] - expect[(t, o)]).abs() < 1e-12, "t={t} o={o}");
            }
        }
        assert!(model.step_into(&[0.0; 3], &mut y).is_err());
    }

    #[test]
    fn generation_is_deterministic_across_models() {
        let basis = compute_basis(HankelSpec::new(256).unwrap(), 6).unwrap();
        let params = StuParams::random(6, 2, 2, 0.3, &mut rng::stream(3, "t"));
        let mut conv = NaiveConvStu::new(&params, &basis).unwrap();
        let (_, a) = generate(&mut conv, &[0.5, -0.25], 200).unwrap();
        let (_, b) = generate(&mut conv, &[0.5, -0.25], 200).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bench_rows_and_ratios() {
        let dims = RuntimeDims { width: 2, k: 4, repeats: 1 };
        let rows = runtime_bench(&[64, 128], &[ModelKind::ConvStu, ModelKind::RecurrentLds], &[8, 16], &dims, 0).unwrap();
        assert_eq!(rows.len(), 2 + 4);
        assert_eq!(scaling_ratios(&rows, ModelKind::RecurrentLds, 16).len(), 1);
        assert!(rows.iter().all(|r| r.seconds > 0.0 && r.per_token_us > 0.0));
    }

    #[test]
    fn rejects_unsorted_lengths() {
        let dims = RuntimeDims { width: 1, k: 2, repeats: 1 };
        assert!(runtime_bench(&[128, 64], &[ModelKind::ConvStu], &[], &dims, 0).is_err());
    }
}
