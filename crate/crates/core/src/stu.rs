//! Spectral Transform Unit.
//!
//! `U+[t,j] = sum_{i<=t} u[t-i+1] phi_j(i)` and `U-` likewise with the
//! sign-alternated filter. The non-AR output is
//! `y_t = sum_j M+_j U+[t,j] + M-_j U-[t,j]`; the AR variant reads the
//! spectral terms at lag 2 and adds `y_{t-2}` and three input taps.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;

use crate::conv::CausalConvolver;
use crate::error::{ensure, ensure_dims, Error, Result};
use crate::lds::{DiagonalLds, ImpulseResponse, NoiseSpec};
use crate::rng;
use crate::spectral_basis::{dot, negate_filter, SpectralBasis};

/// Ridge added to the diagonal of the fitting normal equations.
pub const FIT_RIDGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ArTerms {
    /// `M^u_1..M^u_3`, applied to `u_t, u_{t-1}, u_{t-2}`.
    pub m_u: [DMatrix<f64>; 3],
    /// Whether `y_{t-2}` is fed back into `y_t`.
    pub y_feedback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StuParams {
    m_plus: Vec<DMatrix<f64>>,
    m_minus: Vec<DMatrix<f64>>,
    ar: Option<ArTerms>,
}

impl StuParams {
    pub fn new(m_plus: Vec<DMatrix<f64>>, m_minus: Vec<DMatrix<f64>>, ar: Option<ArTerms>) -> Result<Self> {
        ensure(!m_plus.is_empty(), || "an STU needs at least one filter".into())?;
        ensure_dims(m_plus.len() == m_minus.len(), || {
            format!("{} positive vs {} negative coefficient matrices", m_plus.len(), m_minus.len())
        })?;
        let shape = m_plus[0].shape();
        ensure(shape.0 >= 1 && shape.1 >= 1, || "coefficient matrices must be non-empty".into())?;
        let ar_mats = ar.iter().flat_map(|a| a.m_u.iter());
        ensure_dims(
            m_plus.iter().chain(&m_minus).chain(ar_mats).all(|m| m.shape() == shape),
            || format!("all coefficient matrices must be {}x{}", shape.0, shape.1),
        )?;
        Ok(Self { m_plus, m_minus, ar })
    }

    pub fn zeros(k: usize, outputs: usize, inputs: usize) -> Self {
        let z = DMatrix::zeros(outputs, inputs);
        Self {
            m_plus: vec![z.clone(); k],
            m_minus: vec![z; k],
            ar: None,
        }
    }

    /// Entries i.i.d. `N(0, scale^2)`.
    pub fn random(k: usize, outputs: usize, inputs: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut draw = || DMatrix::from_fn(outputs, inputs, |_, _| scale * normal(rng));
        let m_plus = (0..k).map(|_| draw()).collect();
        let m_minus = (0..k).map(|_| draw()).collect();
        Self { m_plus, m_minus, ar: None }
    }

    pub fn with_ar(mut self, ar: Option<ArTerms>) -> Result<Self> {
        if let Some(a) = &ar {
            ensure_dims(a.m_u.iter().all(|m| m.shape() == self.m_plus[0].shape()), || {
                "AR matrices must match the spectral coefficient shape".into()
            })?;
        }
        self.ar = ar;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.m_plus.len()
    }

    pub fn outputs(&self) -> usize {
        self.m_plus[0].nrows()
    }

    pub fn inputs(&self) -> usize {
        self.m_plus[0].ncols()
    }

    pub fn m_plus(&self) -> &[DMatrix<f64>] {
        &self.m_plus
    }

    pub fn m_minus(&self) -> &[DMatrix<f64>] {
        &self.m_minus
    }

    pub fn ar(&self) -> Option<&ArTerms> {
        self.ar.as_ref()
    }

    fn check_basis(&self, basis: &SpectralBasis) -> Result<()> {
        ensure_dims(self.k() == basis.k(), || {
            format!("parameters use k = {}, basis has k = {}", self.k(), basis.k())
        })
    }

    fn check_inputs(&self, inputs: &DMatrix<f64>) -> Result<()> {
        ensure_dims(inputs.ncols() == self.inputs(), || {
            format!("input has {} channels, parameters expect {}", inputs.ncols(), self.inputs())
        })
    }

    /// Output without the autoregressive component; `inputs` is `T x n`.
    pub fn forward_nonar(&self, basis: &SpectralBasis, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_basis(basis)?;
        self.check_inputs(inputs)?;
        let proj = project_inputs(basis, inputs)?;
        let mut out = DMatrix::zeros(inputs.nrows(), self.outputs());
        let mut y = vec![0.0; self.outputs()];
        for t in 0..inputs.nrows() {
            self.spectral_term(&proj, t, &mut y);
            for (o, v) in y.iter().enumerate() {
                out[(t, o)] = *v;
            }
        }
        Ok(out)
    }

    /// Output with the autoregressive component. Terms whose time index
    /// falls before the first step contribute zero.
    pub fn forward_ar(&self, basis: &SpectralBasis, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let ar = self
            .ar
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("forward_ar needs AR terms".into()))?;
        self.check_basis(basis)?;
        self.check_inputs(inputs)?;
        let proj = project_inputs(basis, inputs)?;
        let (t_len, m) = (inputs.nrows(), self.outputs());
        let mut out = DMatrix::<f64>::zeros(t_len, m);
        let mut y = vec![0.0; m];
        for t in 0..t_len {
            y.iter_mut().for_each(|v| *v = 0.0);
            if t >= 2 {
                self.spectral_term(&proj, t - 2, &mut y);
                if ar.y_feedback {
                    for (o, v) in y.iter_mut().enumerate() {
                        *v += out[(t - 2, o)];
                    }
                }
            }
            for (i, mu) in ar.m_u.iter().enumerate() {
                if t >= i {
                    for o in 0..m {
                        let mut acc = 0.0;
                        for c in 0..self.inputs() {
                            acc += mu[(o, c)] * inputs[(t - i, c)];
                        }
                        y[o] += acc;
                    }
                }
            }
            for (o, v) in y.iter().enumerate() {
                out[(t, o)] = *v;
            }
        }
        Ok(out)
    }

    /// `sum_j M+_j U+[t,j] + M-_j U-[t,j]` written into `y`.
    pub(crate) fn spectral_term(&self, proj: &Projections, t: usize, y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.k() {
            let (up, um) = (proj.plus(t, j), proj.minus(t, j));
            let (mp, mm) = (&self.m_plus[j], &self.m_minus[j]);
            for (o, yo) in y.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..up.len() {
                    acc += mp[(o, c)] * up[c] + mm[(o, c)] * um[c];
                }
                *yo += acc;
            }
        }
    }

    /// `psi[t] = sum_j M+_j phi_j[t] + (-1)^(t-1) M-_j phi_j[t]`; AR terms are
    /// not part of the impulse.
    pub fn impulse(&self, basis: &SpectralBasis, len: usize) -> Result<ImpulseResponse> {
        self.check_basis(basis)?;
        ensure(len <= basis.len(), || format!("impulse length {len} exceeds L = {}", basis.len()))?;
        let (m, n) = (self.outputs(), self.inputs());
        let mut resp = ImpulseResponse::zeros(m, n, len);
        for o in 0..m {
            for c in 0..n {
                let plus: Vec<f64> = self.m_plus.iter().map(|mj| mj[(o, c)]).collect();
                let minus: Vec<f64> = self.m_minus.iter().map(|mj| mj[(o, c)]).collect();
                write_kernel(basis, &plus, &minus, &mut resp.series_mut(o, c)[..]);
            }
        }
        Ok(resp)
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `sum_j plus[j] phi_j + minus[j] negate(phi_j)` over the first `out.len()` taps.
fn write_kernel(basis: &SpectralBasis, plus: &[f64], minus: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..plus.len() {
        let f = &basis.filter(j)[..out.len()];
        let (p, q) = (plus[j], minus[j]);
        for (t, (o, &x)) in out.iter_mut().zip(f).enumerate() {
            let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
            *o += p * x + q * sign * x;
        }
    }
}

/// `U+` and `U-`, each `T x k x n` with the channel index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    len: usize,
    k: usize,
    channels: usize,
    plus: Vec<f64>,
    minus: Vec<f64>,
}

impl Projections {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `U+[t, j]` over channels, 0-based `t` and `j`.
    pub fn plus(&self, t: usize, j: usize) -> &[f64] {
        let s = (t * self.k + j) * self.channels;
        &self.plus[s..s + self.channels]
    }

    pub fn minus(&self, t: usize, j: usize) -> &[f64] {
        let s = (t * self.k + j) * self.channels;
        &self.minus[s..s + self.channels]
    }
}

/// Causal convolution of every input channel with every `phi_j` and its
/// sign-alternated twin, via FFT.
pub fn project_inputs(basis: &SpectralBasis, inputs: &DMatrix<f64>) -> Result<Projections> {
    let (t_len, n, k) = (inputs.nrows(), inputs.ncols(), basis.k());
    ensure(t_len <= basis.len(), || {
        format!("sequence length {t_len} exceeds filter length {}", basis.len())
    })?;
    let mut proj = Projections {
        len: t_len,
        k,
        channels: n,
        plus: vec![0.0; t_len * k * n],
        minus: vec![0.0; t_len * k * n],
    };
    if t_len == 0 {
        return Ok(proj);
    }
    let conv = CausalConvolver::new(t_len);
    let filt_plus: Vec<Vec<Complex64>> = (0..k).map(|j| conv.spectrum(basis.filter(j))).collect();
    let filt_minus: Vec<Vec<Complex64>> = (0..k)
        .map(|j| conv.spectrum(&negate_filter(&basis.filter(j)[..t_len])))
        .collect();
    let u = inputs.as_slice();
    for c in 0..n {
        let su = conv.spectrum(&u[c * t_len..(c + 1) * t_len]);
        for j in 0..k {
            let a: Vec<Complex64> = su.iter().zip(&filt_plus[j]).map(|(x, y)| x * y).collect();
            let b: Vec<Complex64> = su.iter().zip(&filt_minus[j]).map(|(x, y)| x * y).collect();
            let (p, q) = conv.inverse_real_pair(&a, &b);
            for t in 0..t_len {
                let idx = (t * k + j) * n + c;
                proj.plus[idx] = p[t];
                proj.minus[idx] = q[t];
            }
        }
    }
    Ok(proj)
}

/// Ridge-regularised least-squares fit of `[phi_j ; negate(phi_j)]`
/// coefficients to scalar kernels.
///
/// The solution is that of the `2k x 2k` normal equations with `FIT_RIDGE`
/// on the diagonal, evaluated through an SVD of the stacked filter matrix so
/// the near-null directions of the Gram matrix are not amplified by rounding.
#[derive(Debug, Clone)]
pub struct ImpulseFitter {
    basis: SpectralBasis,
    /// Left singular vectors of the stacked filters, `L x 2k`.
    u: DMatrix<f64>,
    singular_values: Vec<f64>,
    /// Right singular vectors as columns, `2k x 2k`.
    v: DMatrix<f64>,
    /// `V diag(s / (s^2 + ridge))`, `2k x 2k`.
    solve: DMatrix<f64>,
    condition: f64,
}

/// Gram condition estimate above which fitting logs a warning.
pub const ILL_CONDITIONED: f64 = 1e10;

impl ImpulseFitter {
    pub fn new(basis: &SpectralBasis) -> Result<Self> {
        let (l, k) = (basis.len(), basis.k());
        let mut stacked = DMatrix::zeros(l, 2 * k);
        stacked.columns_mut(0, k).copy_from(basis.phi());
        for j in 0..k {
            for t in 0..l {
                let v = basis.phi()[(t, j)];
                stacked[(t, k + j)] = if t % 2 == 0 { v } else { -v };
            }
        }
        let svd = stacked.svd(true, true);
        let u = svd.u.ok_or_else(|| Error::RankDeficient("SVD of the filter bank failed".into()))?;
        let v_t = svd.v_t.ok_or_else(|| Error::RankDeficient("SVD of the filter bank failed".into()))?;
        let s = svd.singular_values;
        let v = v_t.transpose();
        let mut solve = v.clone();
        for (i, &si) in s.iter().enumerate() {
            let f = si / (si * si + FIT_RIDGE);
            solve.column_mut(i).scale_mut(f);
        }
        let (lo, hi) = s
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v * v), hi.max(v * v)));
        let condition = (hi + FIT_RIDGE) / (lo + FIT_RIDGE);
        if condition > ILL_CONDITIONED {
            log::debug!("filter Gram matrix condition estimate {condition:.3e}; ridge {FIT_RIDGE:e} applied");
        }
        Ok(Self {
            basis: basis.clone(),
            u,
            singular_values: s.iter().copied().collect(),
            v,
            solve,
            condition,
        })
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    /// Condition estimate of the regularised Gram matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Returns `(plus, minus, residual_l2)` for a length-`L` target.
    pub fn fit_series(&self, target: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let (l, k) = (self.basis.len(), self.basis.k());
        ensure_dims(target.len() == l, || format!("target length {} != L = {l}", target.len()))?;
        let proj = DVector::from_iterator(2 * k, (0..2 * k).map(|i| dot(&self.u.as_slice()[i * l..(i + 1) * l], target)));
        let sol = &self.solve * proj;
        let plus: Vec<f64> = sol.rows(0, k).iter().copied().collect();
        let minus: Vec<f64> = sol.rows(k, k).iter().copied().collect();
        let mut fitted = vec![0.0; l];
        write_kernel(&self.basis, &plus, &minus, &mut fitted);
        let residual = fitted.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        Ok((plus, minus, residual))
    }
}

#[derive(Debug, Clone)]
pub struct StuFit {
    pub params: StuParams,
    /// L2 impulse residual per `(output, input)` pair, row-major.
    pub residuals: Vec<f64>,
    pub condition: f64,
}

impl StuFit {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// Closed-form least-squares fit of STU coefficients to a target kernel.
pub fn fit_stu_to_impulse(target: &ImpulseResponse, basis: &SpectralBasis) -> Result<StuFit> {
    fit_with(&ImpulseFitter::new(basis)?, target)
}

pub fn fit_with(fitter: &ImpulseFitter, target: &ImpulseResponse) -> Result<StuFit> {
    let basis = fitter.basis();
    ensure_dims(target.len() == basis.len(), || {
        format!("target length {} != L = {}", target.len(), basis.len())
    })?;
    let (m, n, k) = (target.outputs(), target.inputs(), basis.k());
    let mut params = StuParams::zeros(k, m, n);
    let mut residuals = Vec::with_capacity(m * n);
    for o in 0..m {
        for c in 0..n {
            let (plus, minus, res) = fitter.fit_series(target.series(o, c))?;
            for j in 0..k {
                params.m_plus[j][(o, c)] = plus[j];
                params.m_minus[j][(o, c)] = minus[j];
            }
            residuals.push(res);
        }
    }
    Ok(StuFit {
        params,
        residuals,
        condition: fitter.condition(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Gd,
    /// Per-coordinate step `lr / (sqrt(sum g^2) + eps)`.
    AdaGrad { eps: f64 },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GdConfig {
    /// Sequences per step.
    pub batches: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub parametrization: Parametrization,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self {
            batches: 8,
            seq_len: 256,
            lr: 0.25,
            steps: 2000,
            seed: 0,
            optimizer: Optimizer::Gd,
            parametrization: Parametrization::Whitened,
        }
    }
}

/// A minibatch of `T x n` inputs and `T x m` targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<DMatrix<f64>>,
    pub targets: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct GdFit {
    pub params: StuParams,
    pub losses: Vec<f64>,
    pub final_mse: f64,
}

/// Seeded standard-Gaussian inputs for step `step`; `T x n` per sequence.
pub fn gaussian_inputs(seed: u64, label: &str, step: u64, batches: usize, seq_len: usize, n: usize, std: f64) -> Vec<DMatrix<f64>> {
    let mut r = rng::substream(seed, label, step);
    (0..batches)
        .map(|_| DMatrix::from_fn(seq_len, n, |_, _| std * normal(&mut r)))
        .collect()
}

/// Gaussian inputs with standard deviation `input_std` pushed through `lds`.
/// Noise seeds derive from `(seed, step, sequence index)`.
pub fn lds_batch(
    lds: &DiagonalLds,
    seed: u64,
    step: u64,
    batches: usize,
    seq_len: usize,
    input_std: f64,
    noise: Option<NoiseSpec>,
) -> Result<Batch> {
    let inputs = gaussian_inputs(seed, "io-inputs", step, batches, seq_len, lds.input_dim(), input_std);
    let targets = inputs
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let spec = noise.map(|ns| NoiseSpec {
                seed: rng::stream_seed(seed ^ ns.seed, &format!("io-noise/{step}/{i}")),
                ..ns
            });
            lds.simulate(u, spec.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { inputs, targets })
}

/// Coordinates the trainer optimises in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    /// The `2k` filter coefficients themselves.
    Coefficients,
    /// Orthonormal left singular vectors of the stacked `[phi ; negate(phi)]`
    /// bank, dropping directions with squared singular value below the
    /// fitting ridge. The stacked bank is close to rank deficient, so plain
    /// coefficient descent crawls along its weak directions.
    Whitened,
}

/// Linear map between trainable coordinates `z` and STU coefficients
/// `theta = to_theta z`, with the kernel `sum_i z_i d_i`.
#[derive(Debug, Clone)]
struct Frame {
    /// Kernel directions, each of length `L`.
    directions: Vec<Vec<f64>>,
    to_theta: DMatrix<f64>,
    from_theta: DMatrix<f64>,
}

impl Frame {
    fn new(fitter: &ImpulseFitter, kind: Parametrization) -> Self {
        let basis = fitter.basis();
        let (l, k) = (basis.len(), basis.k());
        match kind {
            Parametrization::Coefficients => {
                let mut directions: Vec<Vec<f64>> = (0..k).map(|j| basis.filter(j).to_vec()).collect();
                directions.extend((0..k).map(|j| negate_filter(basis.filter(j))));
                Self {
                    directions,
                    to_theta: DMatrix::identity(2 * k, 2 * k),
                    from_theta: DMatrix::identity(2 * k, 2 * k),
                }
            }
            Parametrization::Whitened => {
                let keep: Vec<usize> = (0..2 * k)
                    .filter(|&i| fitter.singular_values[i].powi(2) > FIT_RIDGE)
                    .collect();
                let directions = keep
                    .iter()
                    .map(|&i| fitter.u.as_slice()[i * l..(i + 1) * l].to_vec())
                    .collect();
                let to_theta = DMatrix::from_fn(2 * k, keep.len(), |r, c| {
                    fitter.v[(r, keep[c])] / fitter.singular_values[keep[c]]
                });
                let from_theta = DMatrix::from_fn(keep.len(), 2 * k, |r, c| {
                    fitter.v[(c, keep[r])] * fitter.singular_values[keep[r]]
                });
                Self {
                    directions,
                    to_theta,
                    from_theta,
                }
            }
        }
    }

    fn dim(&self) -> usize {
        self.directions.len()
    }
}

/// Gradient-based STU training on input/output pairs.
///
/// The non-AR STU is a causal convolution with its impulse response, so the
/// forward pass and the gradient are computed in the frequency domain per
/// `(output, input)` kernel rather than per filter.
#[derive(Debug)]
pub struct StuTrainer {
    k: usize,
    seq_len: usize,
    outputs: usize,
    inputs: usize,
    conv: CausalConvolver,
    frame: Frame,
    /// `[(o * n + c) * dim + i]`.
    z: Vec<f64>,
    accum: Vec<f64>,
}

impl StuTrainer {
    pub fn new(basis: &SpectralBasis, seq_len: usize, init: &StuParams, kind: Parametrization) -> Result<Self> {
        Self::with_fitter(&ImpulseFitter::new(basis)?, seq_len, init, kind)
    }

    pub fn with_fitter(fitter: &ImpulseFitter, seq_len: usize, init: &StuParams, kind: Parametrization) -> Result<Self> {
        let basis = fitter.basis();
        init.check_basis(basis)?;
        ensure(seq_len >= 1 && seq_len <= basis.len(), || {
            format!("sequence length {seq_len} must lie in 1..={}", basis.len())
        })?;
        let (m, n, k) = (init.outputs(), init.inputs(), basis.k());
        let frame = Frame::new(fitter, kind);
        let dim = frame.dim();
        let mut z = vec![0.0; m * n * dim];
        for o in 0..m {
            for c in 0..n {
                let theta = DVector::from_iterator(
                    2 * k,
                    (0..k).map(|j| init.m_plus[j][(o, c)]).chain((0..k).map(|j| init.m_minus[j][(o, c)])),
                );
                let zc = &frame.from_theta * theta;
                z[(o * n + c) * dim..(o * n + c + 1) * dim].copy_from_slice(zc.as_slice());
            }
        }
        Ok(Self {
            k,
            seq_len,
            outputs: m,
            inputs: n,
            conv: CausalConvolver::new(seq_len),
            accum: vec![0.0; z.len()],
            frame,
            z,
        })
    }

    pub fn params(&self) -> StuParams {
        let (m, n, k, dim) = (self.outputs, self.inputs, self.k, self.frame.dim());
        let mut p = StuParams::zeros(k, m, n);
        for o in 0..m {
            for c in 0..n {
                let zc = DVector::from_column_slice(&self.z[(o * n + c) * dim..(o * n + c + 1) * dim]);
                let theta = &self.frame.to_theta * zc;
                for j in 0..k {
                    p.m_plus[j][(o, c)] = theta[j];
                    p.m_minus[j][(o, c)] = theta[k + j];
                }
            }
        }
        p
    }

    fn kernel_spectra(&self) -> Vec<Vec<Complex64>> {
        let (dim, t_len) = (self.frame.dim(), self.seq_len);
        let mut kernel = vec![0.0; t_len];
        (0..self.outputs * self.inputs)
            .map(|oc| {
                let zc = &self.z[oc * dim..(oc + 1) * dim];
                kernel.iter_mut().for_each(|v| *v = 0.0);
                for (w, d) in zc.iter().zip(&self.frame.directions) {
                    for (kt, dt) in kernel.iter_mut().zip(&d[..t_len]) {
                        *kt += w * dt;
                    }
                }
                self.conv.spectrum(&kernel)
            })
            .collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        ensure(!batch.inputs.is_empty() && batch.inputs.len() == batch.targets.len(), || {
            "batch must hold matching, non-empty inputs and targets".into()
        })?;
        for (u, y) in batch.inputs.iter().zip(&batch.targets) {
            ensure_dims(
                u.shape() == (self.seq_len, self.inputs) && y.shape() == (self.seq_len, self.outputs),
                || format!("batch sequences must be {}x{} -> {}x{}", self.seq_len, self.inputs, self.seq_len, self.outputs),
            )?;
        }
        Ok(())
    }

    /// Model outputs for each input sequence.
    pub fn predict(&self, inputs: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let spectra = self.kernel_spectra();
        inputs.iter().map(|u| self.predict_one(&spectra, u).1).collect()
    }

    fn predict_one(&self, spectra: &[Vec<Complex64>], u: &DMatrix<f64>) -> (Vec<Vec<Complex64>>, DMatrix<f64>) {
        let (t_len, n, m) = (self.seq_len, self.inputs, self.outputs);
        let su: Vec<Vec<Complex64>> = (0..n)
            .map(|c| self.conv.spectrum(&u.as_slice()[c * t_len..(c + 1) * t_len]))
            .collect();
        let mut y = DMatrix::zeros(t_len, m);
        let nf = self.conv.fft_len();
        for o in 0..m {
            let mut acc = vec![Complex64::new(0.0, 0.0); nf];
            for c in 0..n {
                for ((a, s), u) in acc.iter_mut().zip(&spectra[o * n + c]).zip(&su[c]) {
                    *a += s * u;
                }
            }
            let yo = self.conv.inverse_real(&mut acc);
            y.column_mut(o).copy_from_slice(&yo);
        }
        (su, y)
    }

    /// Mean squared error of the current parameters on `batch`.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.check_batch(batch)?;
        let preds = self.predict(&batch.inputs);
        Ok(mse(&preds, &batch.targets))
    }

    /// One optimizer step; returns the pre-step batch loss.
    pub fn step(&mut self, batch: &Batch, lr: f64, optimizer: Optimizer) -> Result<f64> {
        self.check_batch(batch)?;
        let (t_len, n, m, dim) = (self.seq_len, self.inputs, self.outputs, self.frame.dim());
        let nf = self.conv.fft_len();
        let spectra = self.kernel_spectra();
        // Batch sum of R_o * conj(U_c): the residual/input cross-correlation.
        let mut cross = vec![vec![Complex64::new(0.0, 0.0); nf]; m * n];
        let mut sq = 0.0;
        for (u, target) in batch.inputs.iter().zip(&batch.targets) {
            let (su, y) = self.predict_one(&spectra, u);
            for o in 0..m {
                let r: Vec<f64> = (0..t_len).map(|t| y[(t, o)] - target[(t, o)]).collect();
                sq += r.iter().map(|v| v * v).sum::<f64>();
                let sr = self.conv.spectrum(&r);
                for c in 0..n {
                    for ((acc, a), b) in cross[o * n + c].iter_mut().zip(&sr).zip(&su[c]) {
                        *acc += a * b.conj();
                    }
                }
            }
        }
        let count = (batch.inputs.len() * t_len * m) as f64;
        let loss = sq / count;
        let scale = 2.0 / count;
        let mut grad = vec![0.0; self.z.len()];
        for (oc, spectrum) in cross.iter_mut().enumerate() {
            let g = self.conv.inverse_real(spectrum);
            for (gi, d) in grad[oc * dim..(oc + 1) * dim].iter_mut().zip(&self.frame.directions) {
                *gi = scale * dot(&d[..t_len], &g);
            }
        }
        match optimizer {
            Optimizer::Gd => {
                for (p, g) in self.z.iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::AdaGrad { eps } => {
                for ((p, g), a) in self.z.iter_mut().zip(&grad).zip(self.accum.iter_mut()) {
                    *a += g * g;
                    *p -= lr * g / (a.sqrt() + eps);
                }
            }
        }
        Ok(loss)
    }

    /// Runs `steps` optimizer steps on batches from `data`, aborting when the
    /// loss exceeds ten times the best loss seen or stops being finite.
    pub fn train(
        &mut self,
        steps: usize,
        lr: f64,
        optimizer: Optimizer,
        mut data: impl FnMut(u64) -> Result<Batch>,
    ) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(steps);
        let mut best = f64::INFINITY;
        for s in 0..steps {
            let batch = data(s as u64)?;
            let loss = self.step(&batch, lr, optimizer)?;
            if !loss.is_finite() || loss > 10.0 * best {
                return Err(Error::Diverged { step: s, loss, best });
            }
            best = best.min(loss);
            losses.push(loss);
        }
        Ok(losses)
    }
}

pub fn mse(preds: &[DMatrix<f64>], targets: &[DMatrix<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        sum += p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += p.len();
    }
    sum / count.max(1) as f64
}

/// Fits STU coefficients by gradient descent on seeded Gaussian input
/// sequences pushed through `lds`, starting from zero.
pub fn fit_stu_to_lds_io(lds: &DiagonalLds, basis: &SpectralBasis, cfg: &GdConfig) -> Result<GdFit> {
    ensure(cfg.batches >= 1 && cfg.steps >= 1, || "batches and steps must be positive".into())?;
    let init = StuParams::zeros(basis.k(), lds.output_dim(), lds.input_dim());
    let mut trainer = StuTrainer::new(basis, cfg.seq_len, &init, cfg.parametrization)?;
    let losses = trainer.train(cfg.steps, cfg.lr, cfg.optimizer, |s| {
        lds_batch(lds, cfg.seed, s, cfg.batches, cfg.seq_len, 1.0, None)
    })?;
    let eval = lds_batch(lds, cfg.seed, u64::MAX, cfg.batches, cfg.seq_len, 1.0, None)?;
    let final_mse = trainer.loss(&eval)?;
    Ok(GdFit {
        params: trainer.params(),
        losses,
        final_mse,
    })
}
