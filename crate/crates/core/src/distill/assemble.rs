use nalgebra::DMatrix;

use super::DistilledFilters;
use crate::error::{ensure_dims, Result};
use crate::lds::{DiagonalLds, ImpulseResponse};
use crate::stu::{fit_with, ArTerms, ImpulseFitter, StuFit, StuParams};

/// Filter LDS whose `k` outputs are the distilled positive filters applied
/// to a scalar input. With `with_negative` the state doubles with `-A` and
/// the outputs are the positive block followed by the sign-alternated block.
pub fn assemble_filter_lds(distilled: &DistilledFilters, with_negative: bool) -> Result<DiagonalLds> {
    let (k, h) = (distilled.k(), distilled.h());
    let cg = distilled.output_map();
    if !with_negative {
        return DiagonalLds::new(distilled.alphas().to_vec(), DMatrix::from_element(h, 1, 1.0), cg);
    }
    let mut alpha = distilled.alphas().to_vec();
    alpha.extend(distilled.alphas().iter().map(|a| -a));
    let mut c = DMatrix::zeros(2 * k, 2 * h);
    c.view_mut((0, 0), (k, h)).copy_from(&cg);
    c.view_mut((k, h), (k, h)).copy_from(&cg);
    DiagonalLds::new(alpha, DMatrix::from_element(2 * h, 1, 1.0), c)
}

/// Token-by-token STU evaluation through the distilled filter LDS.
#[derive(Debug, Clone)]
pub struct RecurrentStu {
    alphas: Vec<f64>,
    cg: DMatrix<f64>,
    /// `m x (k n)`, column `c k + j` holds `M+_j[:, c]`.
    w_plus: DMatrix<f64>,
    w_minus: DMatrix<f64>,
    ar: Option<ArTerms>,
    /// `2h x n`: positive states, then negative states.
    state: DMatrix<f64>,
    u_plus: DMatrix<f64>,
    u_minus: DMatrix<f64>,
    spectral: DMatrix<f64>,
    /// Previous outputs, spectral terms and inputs, newest first.
    y_hist: [Vec<f64>; 2],
    s_hist: [Vec<f64>; 2],
    u_hist: [Vec<f64>; 2],
    t: usize,
}

/// Replaces the convolutional spectral component of `params` by the
/// distilled recurrence.
pub fn distill_stu_model(params: &StuParams, distilled: &DistilledFilters) -> Result<RecurrentStu> {
    ensure_dims(params.k() == distilled.k(), || {
        format!("parameters use k = {}, distilled filters k = {}", params.k(), distilled.k())
    })?;
    let (k, h, m, n) = (params.k(), distilled.h(), params.outputs(), params.inputs());
    let mut w_plus = DMatrix::zeros(m, k * n);
    let mut w_minus = DMatrix::zeros(m, k * n);
    for j in 0..k {
        for c in 0..n {
            w_plus.column_mut(c * k + j).copy_from(&params.m_plus()[j].column(c));
            w_minus.column_mut(c * k + j).copy_from(&params.m_minus()[j].column(c));
        }
    }
    Ok(RecurrentStu {
        alphas: distilled.alphas().to_vec(),
        cg: distilled.output_map(),
        w_plus,
        w_minus,
        ar: params.ar().cloned(),
        state: DMatrix::zeros(2 * h, n),
        u_plus: DMatrix::zeros(k, n),
        u_minus: DMatrix::zeros(k, n),
        spectral: DMatrix::zeros(m, 1),
        y_hist: [vec![0.0; m], vec![0.0; m]],
        s_hist: [vec![0.0; m], vec![0.0; m]],
        u_hist: [vec![0.0; n], vec![0.0; n]],
        t: 0,
    })
}

impl RecurrentStu {
    pub fn state_dim(&self) -> usize {
        self.state.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.state.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.w_plus.nrows()
    }

    pub fn reset(&mut self) {
        self.state.fill(0.0);
        for v in self.y_hist.iter_mut().chain(self.s_hist.iter_mut()).chain(self.u_hist.iter_mut()) {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.t = 0;
    }

    /// Consumes `u` (length `n`) and writes the output into `y` (length `m`).
    pub fn step_into(&mut self, u: &[f64], y: &mut [f64]) -> Result<()> {
        let (h, n, m) = (self.alphas.len(), self.inputs(), self.outputs());
        ensure_dims(u.len() == n && y.len() == m, || {
            format!("step expects {n} inputs and {m} outputs, got {} and {}", u.len(), y.len())
        })?;
        for (c, &uc) in u.iter().enumerate() {
            let col = &mut self.state.as_mut_slice()[c * 2 * h..(c + 1) * 2 * h];
            let (pos, neg) = col.split_at_mut(h);
            for ((p, q), &a) in pos.iter_mut().zip(neg.iter_mut()).zip(&self.alphas) {
                *p = a * *p + uc;
                *q = -a * *q + uc;
            }
        }
        self.u_plus.gemm(1.0, &self.cg, &self.state.rows(0, h), 0.0);
        self.u_minus.gemm(1.0, &self.cg, &self.state.rows(h, h), 0.0);
        let up = DMatrix::from_column_slice(self.u_plus.len(), 1, self.u_plus.as_slice());
        let um = DMatrix::from_column_slice(self.u_minus.len(), 1, self.u_minus.as_slice());
        self.spectral.gemm(1.0, &self.w_plus, &up, 0.0);
        self.spectral.gemm(1.0, &self.w_minus, &um, 1.0);

        match &self.ar {
            None => y.copy_from_slice(self.spectral.as_slice()),
            Some(ar) => {
                y.iter_mut().for_each(|v| *v = 0.0);
                if self.t >= 2 {
                    for (o, v) in y.iter_mut().enumerate() {
                        *v += self.s_hist[1][o];
                        if ar.y_feedback {
                            *v += self.y_hist[1][o];
                        }
                    }
                }
                let lagged: [&[f64]; 3] = [u, &self.u_hist[0], &self.u_hist[1]];
                for (i, (mu, x)) in ar.m_u.iter().zip(lagged).enumerate() {
                    if self.t >= i {
                        for (o, v) in y.iter_mut().enumerate() {
                            *v += (0..n).map(|c| mu[(o, c)] * x[c]).sum::<f64>();
                        }
                    }
                }
            }
        }
        self.s_hist.swap(0, 1);
        self.s_hist[0].copy_from_slice(self.spectral.as_slice());
        self.y_hist.swap(0, 1);
        self.y_hist[0].copy_from_slice(y);
        self.u_hist.swap(0, 1);
        self.u_hist[0].copy_from_slice(u);
        self.t += 1;
        Ok(())
    }

    pub fn step(&mut self, u: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.outputs()];
        self.step_into(u, &mut y)?;
        Ok(y)
    }

    /// Runs a `T x n` sequence from the current state.
    pub fn run(&mut self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(inputs.nrows(), self.outputs());
        let mut u = vec![0.0; inputs.ncols()];
        let mut y = vec![0.0; self.outputs()];
        for t in 0..inputs.nrows() {
            for (c, v) in u.iter_mut().enumerate() {
                *v = inputs[(t, c)];
            }
            self.step_into(&u, &mut y)?;
            for (o, v) in y.iter().enumerate() {
                out[(t, o)] = *v;
            }
        }
        Ok(out)
    }
}

/// The spectral component of `params` as one explicit diagonal LDS with
/// `2 h n` states.
pub fn compose_lds(params: &StuParams, distilled: &DistilledFilters) -> Result<DiagonalLds> {
    ensure_dims(params.k() == distilled.k(), || {
        format!("parameters use k = {}, distilled filters k = {}", params.k(), distilled.k())
    })?;
    let (k, h, m, n) = (params.k(), distilled.h(), params.outputs(), params.inputs());
    let cg = distilled.output_map();
    let d = 2 * h * n;
    let mut alpha = vec![0.0; d];
    let mut b = DMatrix::zeros(d, n);
    let mut c = DMatrix::zeros(m, d);
    for ch in 0..n {
        let base = ch * 2 * h;
        for (i, &a) in distilled.alphas().iter().enumerate() {
            alpha[base + i] = a;
            alpha[base + h + i] = -a;
            b[(base + i, ch)] = 1.0;
            b[(base + h + i, ch)] = 1.0;
        }
        for o in 0..m {
            for i in 0..h {
                let (mut p, mut q) = (0.0, 0.0);
                for j in 0..k {
                    p += params.m_plus()[j][(o, ch)] * cg[(j, i)];
                    q += params.m_minus()[j][(o, ch)] * cg[(j, i)];
                }
                c[(o, base + i)] = p;
                c[(o, base + h + i)] = q;
            }
        }
    }
    DiagonalLds::new(alpha, b, c)
}

#[derive(Debug, Clone)]
pub struct LdsDistillation {
    pub lds: DiagonalLds,
    pub fit: StuFit,
    /// Mean squared impulse difference against the source over the basis length.
    pub impulse_mse: f64,
    pub source_impulse: ImpulseResponse,
}

/// Fits the source impulse with STU coefficients and composes them with the
/// distilled filters into a `2 h n`-state system.
pub fn lds_to_lds(source: &DiagonalLds, fitter: &ImpulseFitter, distilled: &DistilledFilters) -> Result<LdsDistillation> {
    let len = fitter.basis().len();
    ensure_dims(distilled.len() == len, || {
        format!("distilled filters have L = {}, basis has L = {len}", distilled.len())
    })?;
    let source_impulse = source.impulse_response(len);
    let fit = fit_with(fitter, &source_impulse)?;
    if fit.max_residual() > 1e-3 * source_impulse.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt() {
        log::warn!("source impulse fit residual {:.3e}", fit.max_residual());
    }
    let lds = compose_lds(&fit.params, distilled)?;
    let impulse_mse = lds.impulse_response(len).mean_squared_diff(&source_impulse)?;
    Ok(LdsDistillation {
        lds,
        fit,
        impulse_mse,
        source_impulse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{build_pair_bank, practical_distill, AlphaSampler, BankFit, PracticalConfig};
    use crate::rng;
    use crate::spectral_basis::{compute_basis, negate_filter, HankelSpec, SpectralBasis};
    use crate::stu::project_inputs;
    use rand_distr::{Distribution, StandardNormal};
    use std::sync::OnceLock;

    struct Fixture {
        basis: SpectralBasis,
        distilled: DistilledFilters,
    }

    fn fixture() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let basis = compute_basis(HankelSpec::new(2048).unwrap(), 8).unwrap();
            let bank = build_pair_bank(&basis, 1500, &AlphaSampler::new(3).signed(), f64::INFINITY, &BankFit::Joint).unwrap();
            let distilled = practical_distill(&bank, &basis, &PracticalConfig::new(8, 32, 30, 1)).unwrap().filters;
            Fixture { basis, distilled }
        })
    }

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::stream(seed, "assemble-test");
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut r))
    }

    #[test]
    fn assembled_impulse_is_the_reconstruction() {
        let f = fixture();
        let lds = assemble_filter_lds(&f.distilled, false).unwrap();
        let imp = lds.impulse_response(f.basis.len());
        let rec = f.distilled.reconstruction();
        let mu = f.distilled.mu_stack();
        let mt = f.distilled.mtilde();
        for j in 0..f.distilled.k() {
            for (t, &v) in imp.series(j, 0).iter().enumerate() {
                // equal up to rounding of the individual terms
                let scale: f64 = (0..f.distilled.h()).map(|i| (mt[(j, i)] * mu[(t, i)]).abs()).sum();
                let want = rec[(t, j)];
                assert!((v - want).abs() <= 1e-13 * scale.max(1e-300), "j={j} t={t}: {v} vs {want}");
            }
        }
    }

    #[test]
    fn negative_block_alternates_the_positive_block() {
        let f = fixture();
        let lds = assemble_filter_lds(&f.distilled, true).unwrap();
        assert_eq!(lds.state_dim(), 2 * f.distilled.h());
        let imp = lds.impulse_response(512);
        let k = f.distilled.k();
        for j in 0..k {
            let neg = negate_filter(imp.series(j, 0));
            assert_eq!(imp.series(k + j, 0), &neg[..]);
        }
    }

    #[test]
    fn assembled_outputs_track_projections() {
        let f = fixture();
        let t_len = 2048;
        let u = gaussian(t_len, 1, 1);
        let proj = project_inputs(&f.basis, &u).unwrap();
        let lds = assemble_filter_lds(&f.distilled, false).unwrap();
        let y = lds.simulate(&u, None).unwrap();
        let mut worst: f64 = 0.0;
        for t in 0..t_len {
            for j in 0..f.distilled.k() {
                worst = worst.max((y[(t, j)] - proj.plus(t, j)[0]).abs());
            }
        }
        let l1: f64 = u.iter().map(|v| v.abs()).sum();
        assert!(worst <= f.distilled.error_fro() * l1, "{worst:e}");
        assert!(worst <= 1e-5, "{worst:e}");
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let f = fixture();
        let params = StuParams::zeros(8, 2, 3);
        let mut model = distill_stu_model(&params, &f.distilled).unwrap();
        let y = model.run(&gaussian(64, 3, 2)).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_matches_convolution() {
        let f = fixture();
        let mut r = rng::stream(4, "params");
        let params = StuParams::random(8, 3, 2, 1.0, &mut r);
        let u = gaussian(2048, 2, 5);
        let conv = params.forward_nonar(&f.basis, &u).unwrap();
        let rec = distill_stu_model(&params, &f.distilled).unwrap().run(&u).unwrap();
        let scale = conv.amax();
        let diff = (&conv - &rec).amax();
        assert!(diff <= 1e-3 * scale, "diff {diff:e} scale {scale:e}");
    }

    #[test]
    fn recurrent_ar_matches_convolutional_ar() {
        let f = fixture();
        let mut r = rng::stream(6, "params");
        let ar = ArTerms {
            m_u: [gaussian(2, 2, 7), gaussian(2, 2, 8), gaussian(2, 2, 9)],
            y_feedback: false,
        };
        let params = StuParams::random(8, 2, 2, 1.0, &mut r).with_ar(Some(ar)).unwrap();
        let u = gaussian(512, 2, 10);
        let conv = params.forward_ar(&f.basis, &u).unwrap();
        let rec = distill_stu_model(&params, &f.distilled).unwrap().run(&u).unwrap();
        assert!((&conv - &rec).amax() <= 1e-3 * conv.amax());
    }

    #[test]
    fn reset_restarts_the_sequence() {
        let f = fixture();
        let mut r = rng::stream(1, "params");
        let params = StuParams::random(8, 1, 1, 1.0, &mut r);
        let mut model = distill_stu_model(&params, &f.distilled).unwrap();
        let u = gaussian(32, 1, 3);
        let a = model.run(&u).unwrap();
        model.reset();
        assert_eq!(a, model.run(&u).unwrap());
    }

    #[test]
    fn k_mismatch_rejected() {
        let f = fixture();
        assert!(distill_stu_model(&StuParams::zeros(4, 1, 1), &f.distilled).is_err());
        assert!(compose_lds(&StuParams::zeros(4, 1, 1), &f.distilled).is_err());
    }

    #[test]
    fn composed_lds_matches_recurrent_model() {
        let f = fixture();
        let mut r = rng::stream(2, "params");
        let params = StuParams::random(8, 2, 3, 1.0, &mut r);
        let lds = compose_lds(&params, &f.distilled).unwrap();
        assert_eq!(lds.state_dim(), 2 * f.distilled.h() * 3);
        let u = gaussian(256, 3, 11);
        let a = lds.simulate(&u, None).unwrap();
        let b = distill_stu_model(&params, &f.distilled).unwrap().run(&u).unwrap();
        assert!((&a - &b).amax() <= 1e-8 * a.amax());
    }

    #[test]
    fn representable_source_is_recovered() {
        let f = fixture();
        let a = f.distilled.alphas()[0];
        let source = DiagonalLds::scalar(1.0 - a, a, 1.0).unwrap();
        let fitter = ImpulseFitter::new(&f.basis).unwrap();
        let out = lds_to_lds(&source, &fitter, &f.distilled).unwrap();
        assert_eq!(out.lds.state_dim(), 2 * f.distilled.h());
        let l = f.basis.len() as f64;
        let fit_res = out.fit.max_residual();
        // impulse error comes from the fit and from the filter reconstruction
        let coef: f64 = out.fit.params.m_plus().iter().chain(out.fit.params.m_minus()).map(|m| m[(0, 0)].abs()).sum();
        let bound = fit_res + coef * f.distilled.error_fro();
        assert!((out.impulse_mse * l).sqrt() <= bound, "{} > {bound}", (out.impulse_mse * l).sqrt());
    }
}
