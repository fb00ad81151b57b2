//! Diagonal linear dynamical systems.
//!
//! `x_t = diag(alpha) x_{t-1} + B u_t`, `y_t = C x_t`, `x_0 = 0`.
//! Sequences are `T x channels` matrices, one time step per row.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, ensure_dims, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalLds {
    alpha: Vec<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
}

impl DiagonalLds {
    /// `b` is `h x n`, `c` is `m x h`; every `|alpha_i| <= 1`.
    pub fn new(alpha: Vec<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let h = alpha.len();
        ensure(h >= 1, || "state dimension must be positive".into())?;
        ensure(alpha.iter().all(|a| a.is_finite() && a.abs() <= 1.0), || {
            "all alpha must lie in [-1, 1]".into()
        })?;
        ensure_dims(b.nrows() == h, || format!("B has {} rows, state dimension is {h}", b.nrows()))?;
        ensure_dims(c.ncols() == h, || format!("C has {} columns, state dimension is {h}", c.ncols()))?;
        ensure_dims(b.ncols() >= 1 && c.nrows() >= 1, || "input and output dimensions must be positive".into())?;
        Ok(Self { alpha, b, c })
    }

    /// Single-input single-output system `(c, a, b)`.
    pub fn scalar(c: f64, a: f64, b: f64) -> Result<Self> {
        Self::new(vec![a], DMatrix::from_element(1, 1, b), DMatrix::from_element(1, 1, c))
    }

    pub fn state_dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn zero_state(&self, batch: usize) -> LdsState {
        LdsState {
            x: DMatrix::zeros(self.state_dim(), batch),
        }
    }

    fn advance(&self, x: &mut [f64], u: &[f64]) {
        for (i, xi) in x.iter_mut().enumerate() {
            let mut acc = self.alpha[i] * *xi;
            for (c, &uc) in u.iter().enumerate() {
                acc += self.b[(i, c)] * uc;
            }
            *xi = acc;
        }
    }

    fn observe(&self, x: &[f64], y: &mut [f64]) {
        for (o, yo) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &xi) in x.iter().enumerate() {
                acc += self.c[(o, i)] * xi;
            }
            *yo = acc;
        }
    }

    /// One transition for every batch column; `u` is `n x batch`, returns
    /// `y` as `m x batch`.
    pub fn step(&self, state: &mut LdsState, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure_dims(state.x.nrows() == self.state_dim(), || {
            format!("state has {} rows, system has {}", state.x.nrows(), self.state_dim())
        })?;
        ensure_dims(u.nrows() == self.input_dim() && u.ncols() == state.x.ncols(), || {
            format!(
                "input is {}x{}, expected {}x{}",
                u.nrows(),
                u.ncols(),
                self.input_dim(),
                state.x.ncols()
            )
        })?;
        let mut y = DMatrix::zeros(self.output_dim(), u.ncols());
        let (h, n, m) = (self.state_dim(), self.input_dim(), self.output_dim());
        for col in 0..u.ncols() {
            let x = &mut state.x.as_mut_slice()[col * h..(col + 1) * h];
            self.advance(x, &u.as_slice()[col * n..(col + 1) * n]);
            self.observe(x, &mut y.as_mut_slice()[col * m..(col + 1) * m]);
        }
        Ok(y)
    }

    /// Runs the recurrence from the zero state over a `T x n` input.
    pub fn simulate(&self, inputs: &DMatrix<f64>, noise: Option<&NoiseSpec>) -> Result<DMatrix<f64>> {
        ensure_dims(inputs.ncols() == self.input_dim(), || {
            format!("input has {} channels, system takes {}", inputs.ncols(), self.input_dim())
        })?;
        ensure(inputs.nrows() >= 1, || "input sequence is empty".into())?;
        let t_len = inputs.nrows();
        let mut out = DMatrix::zeros(t_len, self.output_dim());
        let mut x = vec![0.0; self.state_dim()];
        let mut u = vec![0.0; self.input_dim()];
        let mut y = vec![0.0; self.output_dim()];
        let mut noise_rng = noise.map(|n| (n, rng::stream(n.seed, "lds-noise")));
        for t in 0..t_len {
            for (c, uc) in u.iter_mut().enumerate() {
                *uc = inputs[(t, c)];
            }
            self.advance(&mut x, &u);
            if let Some((spec, r)) = noise_rng.as_mut() {
                let s = spec.state_var.sqrt();
                for xi in x.iter_mut() {
                    *xi += s * sample_normal(r);
                }
            }
            self.observe(&x, &mut y);
            if let Some((spec, r)) = noise_rng.as_mut() {
                let s = spec.output_var.sqrt();
                for yo in y.iter_mut() {
                    *yo += s * sample_normal(r);
                }
            }
            for (o, &yo) in y.iter().enumerate() {
                out[(t, o)] = yo;
            }
        }
        Ok(out)
    }

    /// `psi[t] = C diag(alpha)^(t-1) B` for `t = 1..=len`.
    pub fn impulse_response(&self, len: usize) -> ImpulseResponse {
        let (m, n, h) = (self.output_dim(), self.input_dim(), self.state_dim());
        let mut resp = ImpulseResponse::zeros(m, n, len);
        let mut x = vec![0.0; h];
        for c in 0..n {
            x.copy_from_slice(self.b.column(c).as_slice());
            for t in 0..len {
                for o in 0..m {
                    let mut acc = 0.0;
                    for (i, &xi) in x.iter().enumerate() {
                        acc += self.c[(o, i)] * xi;
                    }
                    resp.data[(o * n + c) * len + t] = acc;
                }
                for (xi, a) in x.iter_mut().zip(&self.alpha) {
                    *xi *= a;
                }
            }
        }
        resp
    }
}

fn sample_normal(r: &mut rng::StreamRng) -> f64 {
    StandardNormal.sample(r)
}

/// Hidden state, `h x batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdsState {
    pub x: DMatrix<f64>,
}

/// Gaussian noise injected after each transition and on each output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub state_var: f64,
    pub output_var: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub const PRESET_STATE_VAR: f64 = 0.5;
    pub const PRESET_OUTPUT_VAR: f64 = 5.0;

    pub fn preset(seed: u64) -> Self {
        Self {
            state_var: Self::PRESET_STATE_VAR,
            output_var: Self::PRESET_OUTPUT_VAR,
            seed,
        }
    }
}

/// `m x n x L` kernel of a causal linear map; each `(output, input)` series
/// is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    outputs: usize,
    inputs: usize,
    len: usize,
    data: Vec<f64>,
}

impl ImpulseResponse {
    pub fn zeros(outputs: usize, inputs: usize, len: usize) -> Self {
        Self {
            outputs,
            inputs,
            len,
            data: vec![0.0; outputs * inputs * len],
        }
    }

    /// `data` is laid out as `[output][input][t]`.
    pub fn from_vec(outputs: usize, inputs: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dims(data.len() == outputs * inputs * len, || {
            format!("{} values for a {outputs}x{inputs}x{len} response", data.len())
        })?;
        Ok(Self { outputs, inputs, len, data })
    }

    pub fn from_series(series: &[f64]) -> Self {
        Self {
            outputs: 1,
            inputs: 1,
            len: series.len(),
            data: series.to_vec(),
        }
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn series(&self, o: usize, c: usize) -> &[f64] {
        let start = (o * self.inputs + c) * self.len;
        &self.data[start..start + self.len]
    }

    pub fn series_mut(&mut self, o: usize, c: usize) -> &mut [f64] {
        let start = (o * self.inputs + c) * self.len;
        &mut self.data[start..start + self.len]
    }

    /// Kernel value at 1-based time `t`.
    pub fn at(&self, o: usize, c: usize, t: usize) -> f64 {
        self.series(o, c)[t - 1]
    }

    /// The `m x n` slice at 1-based time `t`.
    pub fn tap(&self, t: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.outputs, self.inputs, |o, c| self.at(o, c, t))
    }

    pub fn mean_squared_diff(&self, other: &Self) -> Result<f64> {
        ensure_dims(
            self.outputs == other.outputs && self.inputs == other.inputs && self.len == other.len,
            || "impulse responses have different shapes".into(),
        )?;
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(sum / self.data.len().max(1) as f64)
    }
}

/// `(1 - alpha) alpha^(i-1)` for `i = 1..=len`; bitwise equal to the impulse
/// response of the scalar system `(1 - alpha, alpha, 1)`.
pub fn mu_filter(alpha: f64, len: usize) -> Result<Vec<f64>> {
    ensure((0.0..=1.0).contains(&alpha), || format!("alpha = {alpha} outside [0, 1]"))?;
    Ok(geometric_filter(alpha, len))
}

/// `mu_filter` without the domain check, for the signed pair-bank path.
pub(crate) fn geometric_filter(alpha: f64, len: usize) -> Vec<f64> {
    let scale = 1.0 - alpha;
    let mut x = 1.0;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(scale * x);
        x *= alpha;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::causal_convolve_direct;
    use proptest::prelude::*;
    use rand::Rng;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn step_examples() {
        let lds = DiagonalLds::scalar(1.0, 0.5, 1.0).unwrap();
        let mut s = lds.zero_state(1);
        let y = lds.step(&mut s, &col(&[1.0])).unwrap();
        assert_eq!((s.x[(0, 0)], y[(0, 0)]), (1.0, 1.0));
        let y = lds.step(&mut s, &col(&[0.0])).unwrap();
        assert_eq!((s.x[(0, 0)], y[(0, 0)]), (0.5, 0.5));
    }

    #[test]
    fn memoryless_system() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let c = DMatrix::from_row_slice(1, 2, &[3.0, 1.0]);
        let lds = DiagonalLds::new(vec![0.0, 0.0], b.clone(), c.clone()).unwrap();
        let mut s = lds.zero_state(1);
        for u in [[1.0, 0.0], [0.3, -2.0], [5.0, 1.0]] {
            let y = lds.step(&mut s, &col(&u)).unwrap();
            let expect = &c * &b * col(&u);
            assert!((y[(0, 0)] - expect[(0, 0)]).abs() < 1e-14);
        }
    }

    #[test]
    fn simulate_examples() {
        let lds = DiagonalLds::scalar(1.0, 0.5, 1.0).unwrap();
        let y = lds.simulate(&col(&[1.0, 0.0, 0.0]), None).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 0.5, 0.25]);
        let zero = lds.simulate(&col(&[0.0; 8]), None).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_examples() {
        let r = DiagonalLds::scalar(1.0, 0.5, 1.0).unwrap().impulse_response(3);
        assert_eq!(r.series(0, 0), &[1.0, 0.5, 0.25]);
        let r = DiagonalLds::scalar(1.0, -1.0, 1.0).unwrap().impulse_response(4);
        assert_eq!(r.series(0, 0), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn impulse_equals_simulated_impulse() {
        let mut r = rng::stream(3, "lds-test");
        let lds = DiagonalLds::new(
            vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
            DMatrix::from_fn(2, 1, |_, _| r.random_range(-1.0..1.0)),
            DMatrix::from_fn(1, 2, |_, _| r.random_range(-1.0..1.0)),
        )
        .unwrap();
        let mut u = vec![0.0; 16];
        u[0] = 1.0;
        let y = lds.simulate(&col(&u), None).unwrap();
        let psi = lds.impulse_response(16);
        for t in 0..16 {
            assert!((y[(t, 0)] - psi.series(0, 0)[t]).abs() < 1e-15);
        }
    }

    #[test]
    fn mu_examples() {
        assert_eq!(mu_filter(0.0, 4).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert!(mu_filter(1.0, 7).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(mu_filter(0.5, 3).unwrap(), vec![0.5, 0.25, 0.125]);
        assert!(mu_filter(1.5, 3).is_err());
        assert!(mu_filter(-0.1, 3).is_err());
    }

    #[test]
    fn mu_is_scalar_impulse() {
        for a in [0.0, 0.3, 0.9, 0.999] {
            let lds = DiagonalLds::scalar(1.0 - a, a, 1.0).unwrap();
            assert_eq!(lds.impulse_response(64).series(0, 0), mu_filter(a, 64).unwrap().as_slice());
        }
    }

    #[test]
    fn rejects_unstable_and_mismatched() {
        assert!(DiagonalLds::scalar(1.0, 1.01, 1.0).is_err());
        assert!(DiagonalLds::new(vec![0.5], DMatrix::zeros(2, 1), DMatrix::zeros(1, 1)).is_err());
        let lds = DiagonalLds::scalar(1.0, 0.5, 1.0).unwrap();
        let mut s = lds.zero_state(2);
        assert!(lds.step(&mut s, &DMatrix::zeros(1, 1)).is_err());
        assert!(lds.simulate(&DMatrix::zeros(4, 2), None).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let lds = DiagonalLds::scalar(1.0, 0.9, 1.0).unwrap();
        let u = col(&[0.0; 32]);
        let a = lds.simulate(&u, Some(&NoiseSpec::preset(5))).unwrap();
        let b = lds.simulate(&u, Some(&NoiseSpec::preset(5))).unwrap();
        let c = lds.simulate(&u, Some(&NoiseSpec::preset(6))).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn marginal_system_stays_bounded() {
        let delta = 1e-6;
        let lds = DiagonalLds::scalar(1.0, 1.0 - delta, 1.0).unwrap();
        let y = lds.simulate(&DMatrix::from_element(1_000_000, 1, 1.0), None).unwrap();
        let bound = 1.0 / delta;
        assert!(y.iter().all(|v| v.is_finite() && v.abs() <= bound));
    }

    fn random_lds(seed: u64, h: usize, n: usize, m: usize) -> DiagonalLds {
        let mut r = rng::stream(seed, "random-lds");
        DiagonalLds::new(
            (0..h).map(|_| r.random_range(-0.999..0.999)).collect(),
            DMatrix::from_fn(h, n, |_, _| r.random_range(-1.0..1.0)),
            DMatrix::from_fn(m, h, |_, _| r.random_range(-1.0..1.0)),
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn simulate_is_impulse_convolution(seed in any::<u64>(), h in 1usize..6, n in 1usize..3, m in 1usize..3, t_len in 1usize..300) {
            let lds = random_lds(seed, h, n, m);
            let mut r = rng::stream(seed, "inputs");
            let u = DMatrix::from_fn(t_len, n, |_, _| r.random_range(-1.0..1.0));
            let y = lds.simulate(&u, None).unwrap();
            let psi = lds.impulse_response(t_len);
            for o in 0..m {
                let mut expect = vec![0.0; t_len];
                for c in 0..n {
                    let part = causal_convolve_direct(u.column(c).as_slice(), psi.series(o, c));
                    for (e, p) in expect.iter_mut().zip(part) { *e += p; }
                }
                let scale = expect.iter().fold(1e-300f64, |a, v| a.max(v.abs()));
                for t in 0..t_len {
                    prop_assert!((y[(t, o)] - expect[t]).abs() <= 1e-10 * scale);
                }
            }
        }

        #[test]
        fn step_reproduces_simulate_bitwise(seed in any::<u64>(), h in 1usize..6, t_len in 1usize..64) {
            let lds = random_lds(seed, h, 2, 3);
            let mut r = rng::stream(seed, "inputs");
            let u = DMatrix::from_fn(t_len, 2, |_, _| r.random_range(-1.0..1.0));
            let y = lds.simulate(&u, None).unwrap();
            let mut s = lds.zero_state(1);
            for t in 0..t_len {
                let ut = DMatrix::from_fn(2, 1, |c, _| u[(t, c)]);
                let yt = lds.step(&mut s, &ut).unwrap();
                for o in 0..3 { prop_assert_eq!(yt[(o, 0)].to_bits(), y[(t, o)].to_bits()); }
            }
        }

        #[test]
        fn bounded_inputs_give_bounded_outputs(seed in any::<u64>(), delta in 1e-3f64..0.5) {
            let mut r = rng::stream(seed, "stab");
            let h = 4;
            let lds = DiagonalLds::new(
                (0..h).map(|_| (1.0 - delta) * if r.random::<bool>() { 1.0 } else { -1.0 }).collect(),
                DMatrix::from_fn(h, 2, |_, _| r.random_range(-1.0..1.0)),
                DMatrix::from_fn(2, h, |_, _| r.random_range(-1.0..1.0)),
            ).unwrap();
            let u = DMatrix::from_fn(2000, 2, |_, _| r.random_range(-1.0..1.0));
            let y = lds.simulate(&u, None).unwrap();
            let bound = lds.c().norm() * lds.b().norm() / delta * 4.0;
            prop_assert!(y.iter().all(|v| v.abs() <= bound));
        }
    }
}
