//! Causal convolution, direct and FFT-based.
//!
//! All routines return the first `signal.len()` samples of the linear
//! convolution: `out[t] = sum_{i<=t} kernel[i] * signal[t - i]`.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub fn causal_convolve_direct(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let mut out = vec![0.0; n];
    for (t, o) in out.iter_mut().enumerate() {
        let taps = kernel.len().min(t + 1);
        let mut acc = 0.0;
        for i in 0..taps {
            acc += kernel[i] * signal[t - i];
        }
        *o = acc;
    }
    out
}

pub fn causal_convolve_fft(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    if signal.is_empty() {
        return Vec::new();
    }
    let conv = CausalConvolver::new(signal.len());
    let s = conv.spectrum(signal);
    let k = conv.spectrum(kernel);
    conv.convolve_spectra(&s, &k)
}

/// Reusable FFT plans for causal convolutions producing `len` outputs.
///
/// Kernels longer than `len` are truncated since later taps never reach the
/// first `len` outputs.
#[derive(Clone)]
pub struct CausalConvolver {
    len: usize,
    n_fft: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CausalConvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CausalConvolver")
            .field("len", &self.len)
            .field("n_fft", &self.n_fft)
            .finish()
    }
}

impl CausalConvolver {
    pub fn new(len: usize) -> Self {
        let n_fft = (2 * len.max(1) - 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        Self {
            len,
            n_fft,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn fft_len(&self) -> usize {
        self.n_fft
    }

    /// Zero-padded spectrum of the first `len` samples of `x`.
    pub fn spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for (b, &v) in buf.iter_mut().zip(x.iter().take(self.len)) {
            b.re = v;
        }
        self.forward.process(&mut buf);
        buf
    }

    /// Inverse transform of `spec`, scaled, truncated to `len` real samples.
    pub fn inverse_real(&self, spec: &mut [Complex64]) -> Vec<f64> {
        self.inverse.process(spec);
        let scale = 1.0 / self.n_fft as f64;
        spec[..self.len].iter().map(|c| c.re * scale).collect()
    }

    /// Two real signals through one complex inverse transform: returns
    /// `(ifft(a), ifft(b))` for spectra of real sequences.
    pub fn inverse_real_pair(&self, a: &[Complex64], b: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let i = Complex64::new(0.0, 1.0);
        let mut buf: Vec<Complex64> = a.iter().zip(b).map(|(&x, &y)| x + i * y).collect();
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.n_fft as f64;
        let re = buf[..self.len].iter().map(|c| c.re * scale).collect();
        let im = buf[..self.len].iter().map(|c| c.im * scale).collect();
        (re, im)
    }

    pub fn convolve_spectra(&self, a: &[Complex64], b: &[Complex64]) -> Vec<f64> {
        let mut prod: Vec<Complex64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        self.inverse_real(&mut prod)
    }

    pub fn forward_in_place(&self, buf: &mut [Complex64]) {
        self.forward.process(buf);
    }

    pub fn inverse_in_place(&self, buf: &mut [Complex64]) {
        self.inverse.process(buf);
    }
}
