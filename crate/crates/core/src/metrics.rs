//! Displacement-error metrics and the evaluation report.
//!
//! Every metric averages per-sample quantities in index order so results are
//! reproducible bit for bit. Distances are Euclidean in meters.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cvae::{Condition, CvaeError, CvaeModel};
use crate::dataset::{load_samples, DatasetError, Manifest, SampleRecord, Trajectory};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("horizon {0} too short for the half-horizon metric (need at least 3)")]
    HorizonTooShort(usize),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] CvaeError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Validates the pairing and returns the common horizon.
fn horizon_of(preds: &[Trajectory], targets: &[Trajectory]) -> Result<usize> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let h = targets[0].len();
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        if h == 0 || p.len() != h || t.len() != h {
            return Err(MetricsError::LengthMismatch(format!(
                "sample {i}: prediction has {} waypoints, target {}, expected {h}",
                p.len(),
                t.len()
            )));
        }
    }
    Ok(h)
}

fn mean_over_samples(preds: &[Trajectory], targets: &[Trajectory], per: impl Fn(&[[f64; 2]], &[[f64; 2]]) -> f64) -> f64 {
    let sum: f64 = preds.iter().zip(targets).map(|(p, t)| per(p, t)).sum();
    sum / preds.len() as f64
}

fn mean_dist(p: &[[f64; 2]], t: &[[f64; 2]]) -> f64 {
    let sum: f64 = p.iter().zip(t).map(|(&a, &b)| dist(a, b)).sum();
    sum / p.len() as f64
}

/// Mean over samples of the mean waypoint distance.
pub fn ade_full(preds: &[Trajectory], targets: &[Trajectory]) -> Result<f64> {
    horizon_of(preds, targets)?;
    Ok(mean_over_samples(preds, targets, mean_dist))
}

/// Number of leading waypoints scored by [`ade_half`]: `⌊(H−1)/2⌋`.
pub fn half_horizon(h: usize) -> usize {
    h.saturating_sub(1) / 2
}

/// ADE over the first `⌊(H−1)/2⌋` waypoints only.
pub fn ade_half(preds: &[Trajectory], targets: &[Trajectory]) -> Result<f64> {
    let h = horizon_of(preds, targets)?;
    let k = half_horizon(h);
    if k == 0 {
        return Err(MetricsError::HorizonTooShort(h));
    }
    Ok(mean_over_samples(preds, targets, |p, t| mean_dist(&p[..k], &t[..k])))
}

/// Mean final-waypoint distance.
pub fn fde(preds: &[Trajectory], targets: &[Trajectory]) -> Result<f64> {
    let h = horizon_of(preds, targets)?;
    Ok(mean_over_samples(preds, targets, |p, t| dist(p[h - 1], t[h - 1])))
}

/// Mean over samples of the largest waypoint distance.
pub fn mde(preds: &[Trajectory], targets: &[Trajectory]) -> Result<f64> {
    horizon_of(preds, targets)?;
    Ok(mean_over_samples(preds, targets, |p, t| {
        p.iter().zip(t).map(|(&a, &b)| dist(a, b)).fold(0.0, f64::max)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub n: usize,
    pub ade_full: f64,
    pub ade_half: f64,
    pub fde: f64,
    pub mde: f64,
}

impl EvalReport {
    pub fn from_predictions(model: &str, preds: &[Trajectory], targets: &[Trajectory]) -> Result<Self> {
        Ok(Self {
            model: model.to_string(),
            n: preds.len(),
            ade_full: ade_full(preds, targets)?,
            ade_half: ade_half(preds, targets)?,
            fde: fde(preds, targets)?,
            mde: mde(preds, targets)?,
        })
    }

    pub const COLUMNS: [&'static str; 4] = ["ADE_FULL", "ADE_HALF", "FDE", "MDE"];

    /// The metrics row alone, columns in report order.
    pub fn row(&self) -> String {
        self.row_with_width(self.model.len())
    }

    fn row_with_width(&self, w: usize) -> String {
        format!(
            "{:<w$} {:>9.6} {:>9.6} {:>9.6} {:>9.6}",
            self.model, self.ade_full, self.ade_half, self.fde, self.mde
        )
    }

    /// Header line plus the row, units in meters.
    pub fn to_text(&self) -> String {
        let w = self.model.len().max("Model".len());
        let [a, b, c, d] = Self::COLUMNS;
        format!(
            "{:<w$} {a:>9} {b:>9} {c:>9} {d:>9}\n{}\n",
            "Model",
            self.row_with_width(w)
        )
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Anything that turns a sample's inputs into one trajectory.
pub trait Generator: Sync {
    fn horizon(&self) -> usize;
    fn generate(&self, rec: &SampleRecord) -> Result<Trajectory>;
}

impl Generator for CvaeModel {
    fn horizon(&self) -> usize {
        self.config().horizon
    }

    fn generate(&self, rec: &SampleRecord) -> Result<Trajectory> {
        Ok(self.infer_map(&Condition::from_record(rec))?)
    }
}

/// Test stub that returns the ground truth.
#[derive(Debug, Clone, Copy)]
pub struct EchoGenerator {
    pub horizon: usize,
}

impl Generator for EchoGenerator {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn generate(&self, rec: &SampleRecord) -> Result<Trajectory> {
        Ok(rec.target.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Generate for every record (in parallel) and score against the targets.
pub fn evaluate_records<G: Generator + ?Sized>(gen: &G, model_name: &str, records: &[SampleRecord]) -> Result<EvalReport> {
    if let Some(r) = records.iter().find(|r| r.target.len() != gen.horizon()) {
        return Err(MetricsError::ConfigMismatch(format!(
            "model horizon {} but a sample has {} waypoints",
            gen.horizon(),
            r.target.len()
        )));
    }
    let preds = records
        .par_iter()
        .map(|r| gen.generate(r))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Trajectory> = records.iter().map(|r| r.target.clone()).collect();
    EvalReport::from_predictions(model_name, &preds, &targets)
}

/// Evaluate on one split of a dataset directory.
pub fn evaluate<G: Generator + ?Sized>(gen: &G, model_name: &str, dir: &Path, split: Split) -> Result<EvalReport> {
    let manifest = Manifest::load(dir)?;
    if manifest.config.horizon != gen.horizon() {
        return Err(MetricsError::ConfigMismatch(format!(
            "model horizon {} vs dataset H {}",
            gen.horizon(),
            manifest.config.horizon
        )));
    }
    let keys = match split {
        Split::Train => &manifest.train,
        Split::Test => &manifest.test,
    };
    let records = load_samples(dir, keys)?;
    evaluate_records(gen, model_name, &records)
}

#[cfg(test)]
mod tests;
