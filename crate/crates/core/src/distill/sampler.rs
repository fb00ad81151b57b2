use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::{self, StreamRng};

/// Mixture over a uniform body and two bands near 1, optionally mirrored to
/// negative values with a fair random sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSampler {
    pub seed: u64,
    /// Weights of (body, high band, extreme band).
    pub weights: [f64; 3],
    pub body: (f64, f64),
    pub high_band: (f64, f64),
    pub extreme_band: (f64, f64),
    pub signed: bool,
}

impl AlphaSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            weights: [0.55, 0.30, 0.15],
            body: (0.0, 1.0),
            high_band: (0.9, 1.0),
            extreme_band: (0.99, 1.0),
            signed: false,
        }
    }

    /// Same mixture mirrored onto `[-1, 1]`.
    pub fn signed(mut self) -> Self {
        self.signed = true;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.weights.iter().all(|w| *w >= 0.0) && self.weights.iter().sum::<f64>() > 0.0, || {
            "sampler weights must be non-negative and not all zero".into()
        })?;
        for (lo, hi) in [self.body, self.high_band, self.extreme_band] {
            ensure((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo < hi, || {
                format!("band [{lo}, {hi}) must be a non-empty subset of [0, 1]")
            })?;
        }
        Ok(())
    }

    /// One draw; magnitudes lie in the configured half-open bands.
    pub fn draw(&self, rng: &mut StreamRng) -> f64 {
        let total: f64 = self.weights.iter().sum();
        let pick = rng.random::<f64>() * total;
        let band = if pick < self.weights[0] {
            self.body
        } else if pick < self.weights[0] + self.weights[1] {
            self.high_band
        } else {
            self.extreme_band
        };
        let mag = rng.random_range(band.0..band.1);
        if self.signed && rng.random::<bool>() {
            -mag
        } else {
            mag
        }
    }

    /// `count` distinct draws from the stream labelled `label`.
    pub fn sample_distinct(&self, count: usize, label: &str) -> Result<Vec<f64>> {
        self.validate()?;
        let mut r = rng::stream(self.seed, label);
        let mut out: Vec<f64> = Vec::with_capacity(count);
        while out.len() < count {
            let a = self.draw(&mut r);
            if !out.contains(&a) {
                out.push(a);
            }
        }
        Ok(out)
    }
}

impl Default for AlphaSampler {
    fn default() -> Self {
        Self::new(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_domain_and_band_weights() {
        let s = AlphaSampler::new(3);
        let xs = s.sample_distinct(20_000, "t").unwrap();
        assert!(xs.iter().all(|&a| (0.0..1.0).contains(&a)));
        let high = xs.iter().filter(|&&a| a >= 0.9).count() as f64 / xs.len() as f64;
        let extreme = xs.iter().filter(|&&a| a >= 0.99).count() as f64 / xs.len() as f64;
        // body contributes 10% / 1% of its mass to the bands
        assert!((high - (0.55 * 0.1 + 0.30 + 0.15)).abs() < 0.02, "high {high}");
        assert!((extreme - (0.55 * 0.01 + 0.30 * 0.1 + 0.15)).abs() < 0.02, "extreme {extreme}");
    }

    #[test]
    fn signed_domain_is_mirrored() {
        let xs = AlphaSampler::new(1).signed().sample_distinct(10_000, "t").unwrap();
        assert!(xs.iter().all(|&a| a > -1.0 && a < 1.0));
        let neg = xs.iter().filter(|&&a| a < 0.0).count() as f64 / xs.len() as f64;
        assert!((neg - 0.5).abs() < 0.03);
    }

    #[test]
    fn reproducible() {
        let s = AlphaSampler::new(9);
        assert_eq!(s.sample_distinct(50, "x").unwrap(), s.sample_distinct(50, "x").unwrap());
        assert_ne!(s.sample_distinct(50, "x").unwrap(), s.sample_distinct(50, "y").unwrap());
    }

    #[test]
    fn invalid_bands_rejected() {
        let mut s = AlphaSampler::new(0);
        s.high_band = (0.95, 0.9);
        assert!(s.validate().is_err());
    }
}
