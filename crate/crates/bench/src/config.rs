use serde::{Deserialize, Serialize};

use crate::{BenchError, Result};

/// Settings shared by every experiment driver. Each driver reads only the
/// fields it needs; the whole struct is echoed into every run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub repetitions: usize,
    /// Number of spectral filters.
    pub k: usize,
    /// Filter length.
    pub len: usize,
    /// Distilled state dimensions (condition sweep) or target size (subset curves).
    pub h_values: Vec<usize>,
    pub h_start_values: Vec<usize>,
    pub trials: usize,
    pub bank_size: usize,
    /// Spectral gap: the target system's largest eigenvalue magnitude is `1 - delta`.
    pub delta: f64,
    pub d_in: usize,
    pub d_out: usize,
    pub d_h: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr_baseline: f64,
    pub lr_stu: f64,
    /// Distilled state dimension for the treatment arm.
    pub distill_h: usize,
    pub noise: bool,
    /// Generation lengths for runtime scaling.
    pub t_values: Vec<usize>,
    /// Distilled state dimensions compared at fixed generation length.
    pub state_dims: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            repetitions: 5,
            k: 24,
            len: 1024,
            h_values: vec![24, 48, 96, 192],
            h_start_values: vec![24, 40, 60],
            trials: 100,
            bank_size: 2000,
            delta: 1e-4,
            d_in: 10,
            d_out: 10,
            d_h: 100,
            seq_len: 1024,
            steps: 600,
            batch: 8,
            lr_baseline: 1e-2,
            lr_stu: 1.0,
            distill_h: 64,
            noise: false,
            t_values: vec![8192, 16384, 32768],
            state_dims: vec![100, 800],
        }
    }
}

impl ExperimentConfig {
    /// Condition-number sweep: `h = k, 2k, 4k, 8k` over ten seeds.
    pub fn cond(k: usize) -> Self {
        Self {
            k,
            repetitions: 10,
            h_values: vec![k, 2 * k, 4 * k, 8 * k],
            ..Self::default()
        }
    }

    /// High-memory learning comparison at `delta = 1e-4`.
    pub fn synth() -> Self {
        Self::default()
    }

    /// Noisy identification: `d_h = 256`, largest eigenvalue magnitude 0.99.
    pub fn noisy() -> Self {
        Self {
            delta: 0.01,
            d_h: 256,
            steps: 300,
            noise: true,
            ..Self::default()
        }
    }

    pub fn runtime() -> Self {
        Self {
            repetitions: 1,
            d_in: 2,
            d_out: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("repetitions", self.repetitions),
            ("k", self.k),
            ("len", self.len),
            ("trials", self.trials),
            ("bank_size", self.bank_size),
            ("d_in", self.d_in),
            ("d_out", self.d_out),
            ("d_h", self.d_h),
            ("seq_len", self.seq_len),
            ("steps", self.steps),
            ("batch", self.batch),
            ("distill_h", self.distill_h),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(BenchError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.delta >= 0.0 && self.delta < 1.0) {
            return Err(BenchError::Config(format!("delta = {} must lie in [0, 1)", self.delta)));
        }
        for (name, lr) in [("lr_baseline", self.lr_baseline), ("lr_stu", self.lr_stu)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(BenchError::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("h_values", &self.h_values),
            ("h_start_values", &self.h_start_values),
            ("t_values", &self.t_values),
            ("state_dims", &self.state_dims),
        ] {
            if v.contains(&0) || v.windows(2).any(|w| w[0] >= w[1]) {
                return Err(BenchError::Config(format!("{name} must be positive and strictly ascending")));
            }
        }
        Ok(())
    }
}
