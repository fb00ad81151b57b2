use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use spectralds::io::{load_artifact, save_artifact, Artifact, ArtifactKind};

use crate::config::ExperimentConfig;
use crate::Result;

/// Mean, sample standard deviation and quantiles of the finite values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return Self {
                count: 0,
                mean: f64::NAN,
                std: f64::NAN,
                min: f64::NAN,
                q25: f64::NAN,
                median: f64::NAN,
                q75: f64::NAN,
                max: f64::NAN,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            count: n,
            mean,
            std,
            min: v[0],
            q25: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q75: quantile(&v, 0.75),
            max: v[n - 1],
        }
    }
}

/// Linear interpolation between order statistics of sorted `v`.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub rep: usize,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub losses: Vec<f64>,
    /// Cumulative seconds after each recorded step.
    pub wall_times: Vec<f64>,
    /// Step of the first non-finite or runaway loss; recording stops there.
    pub diverged_at: Option<usize>,
    pub metrics: BTreeMap<String, f64>,
    pub notes: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(name: &str, rep: usize, seed: u64, config: &ExperimentConfig) -> Self {
        Self {
            name: name.to_string(),
            rep,
            seed,
            config: config.clone(),
            losses: Vec::new(),
            wall_times: Vec::new(),
            diverged_at: None,
            metrics: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    /// Records a step; returns `false` once the run has diverged.
    pub fn push_step(&mut self, loss: f64, started: Instant) -> bool {
        if self.diverged_at.is_some() {
            return false;
        }
        if !loss.is_finite() {
            self.diverged_at = Some(self.losses.len());
            return false;
        }
        let t = started.elapsed().as_secs_f64();
        let last = self.wall_times.last().copied().unwrap_or(0.0);
        self.losses.push(loss);
        self.wall_times.push(t.max(last));
        true
    }

    /// Flags divergence at the next step index, e.g. for a runaway loss.
    pub fn mark_diverged(&mut self) {
        self.diverged_at.get_or_insert(self.losses.len());
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Non-finite values go to `notes`, keeping `metrics` JSON-safe.
    pub fn set_metric(&mut self, name: &str, value: f64) {
        if value.is_finite() {
            self.metrics.insert(name.to_string(), value);
        } else {
            self.notes.insert(name.to_string(), value.to_string());
        }
    }

    pub fn note(&mut self, name: &str, value: impl Into<String>) {
        self.notes.insert(name.to_string(), value.into());
    }

    pub fn loss_summary(&self) -> Summary {
        Summary::of(&self.losses)
    }

    pub fn total_time(&self) -> f64 {
        self.wall_times.last().copied().unwrap_or(0.0)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut a = Artifact::new(ArtifactKind::Run)
            .dim("steps", self.losses.len())
            .with_seed(Some(self.seed))
            .meta("record", serde_json::to_value(self)?)
            .array("losses", self.losses.clone())
            .array("wall_times", self.wall_times.clone());
        if let Some(s) = self.diverged_at {
            a = a.dim("diverged_at", s);
        }
        save_artifact(&a, dir)?;
        Ok(())
    }

    /// Loads a record saved by [`RunRecord::save`]; loss and time arrays come
    /// from the checksummed payload.
    pub fn load(dir: &Path) -> Result<Self> {
        let a = load_artifact(dir, Some(ArtifactKind::Run))?;
        let meta = a
            .meta
            .get("record")
            .cloned()
            .ok_or_else(|| spectralds::Error::Manifest("run artifact without record".into()))?;
        let mut r: RunRecord = serde_json::from_value(meta)?;
        r.losses = a.get_array("losses")?.to_vec();
        r.wall_times = a.get_array("wall_times")?.to_vec();
        Ok(r)
    }
}

#[derive(Serialize)]
struct LossRow<'a> {
    name: &'a str,
    rep: usize,
    seed: u64,
    step: usize,
    loss: f64,
    wall_time: f64,
}

/// One row per `(run, step)`.
pub fn write_loss_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        for (step, (&loss, &wall_time)) in r.losses.iter().zip(&r.wall_times).enumerate() {
            w.serialize(LossRow {
                name: &r.name,
                rep: r.rep,
                seed: r.seed,
                step,
                loss,
                wall_time,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}
