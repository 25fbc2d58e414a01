//! Evaluation metrics: point error in meters, label accuracy and grid
//! density divergence.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_m, GeoPoint};
use crate::trajectory::TrajectoryDataset;

pub const DENSITY_GRID: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("dataset has no points")]
    EmptyDataset,
    #[error("invalid bounding box")]
    InvalidBBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mae_m: f64,
    pub rmse_m: f64,
    pub n_points: usize,
}

/// Haversine error at `eval_indices`: mean and root-mean-square.
pub fn mae_rmse(pred: &[GeoPoint], truth: &[GeoPoint], eval_indices: &[usize]) -> Result<ErrorStats, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if eval_indices.is_empty() {
        return Err(MetricError::EmptyEvalSet);
    }
    let errors: Vec<f64> = eval_indices.iter().map(|&i| haversine_m(&pred[i], &truth[i])).collect();
    Ok(stats(&errors))
}

fn stats(errors: &[f64]) -> ErrorStats {
    let n = errors.len() as f64;
    ErrorStats {
        mae_m: errors.iter().sum::<f64>() / n,
        rmse_m: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        n_points: errors.len(),
    }
}

/// Accumulates point errors over many trajectories.
#[derive(Debug, Clone, Default)]
pub struct ErrorAccumulator {
    errors: Vec<f64>,
    per_trajectory: Vec<ErrorStats>,
}

impl ErrorAccumulator {
    pub fn add(&mut self, pred: &[GeoPoint], truth: &[GeoPoint], eval_indices: &[usize]) -> Result<(), MetricError> {
        let s = mae_rmse(pred, truth, eval_indices)?;
        self.errors.extend(eval_indices.iter().map(|&i| haversine_m(&pred[i], &truth[i])));
        self.per_trajectory.push(s);
        Ok(())
    }

    /// Every evaluated point weighs the same.
    pub fn per_point(&self) -> Result<ErrorStats, MetricError> {
        if self.errors.is_empty() {
            return Err(MetricError::EmptyEvalSet);
        }
        Ok(stats(&self.errors))
    }

    /// Every trajectory weighs the same: the mean of per-trajectory MAE and RMSE.
    pub fn per_trajectory(&self) -> Result<ErrorStats, MetricError> {
        if self.per_trajectory.is_empty() {
            return Err(MetricError::EmptyEvalSet);
        }
        let k = self.per_trajectory.len() as f64;
        Ok(ErrorStats {
            mae_m: self.per_trajectory.iter().map(|s| s.mae_m).sum::<f64>() / k,
            rmse_m: self.per_trajectory.iter().map(|s| s.rmse_m).sum::<f64>() / k,
            n_points: self.errors.len(),
        })
    }
}

pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyEvalSet);
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BBox {
    pub min_lng: f64,
    pub min_lat: f64,
    pub max_lng: f64,
    pub max_lat: f64,
}

impl BBox {
    pub fn validate(&self) -> Result<(), MetricError> {
        let ok = [self.min_lng, self.min_lat, self.max_lng, self.max_lat].iter().all(|v| v.is_finite())
            && self.max_lng > self.min_lng
            && self.max_lat > self.min_lat;
        if ok {
            Ok(())
        } else {
            Err(MetricError::InvalidBBox)
        }
    }

    /// Smallest box holding every point of both datasets, widened when degenerate.
    pub fn covering(a: &TrajectoryDataset, b: &TrajectoryDataset) -> Option<BBox> {
        let mut it = a.iter().chain(b.iter()).flat_map(|t| t.points.iter().map(|p| p.pos));
        let first = it.next()?;
        let mut bb = BBox {
            min_lng: first.lng,
            min_lat: first.lat,
            max_lng: first.lng,
            max_lat: first.lat,
        };
        for p in it {
            bb.min_lng = bb.min_lng.min(p.lng);
            bb.min_lat = bb.min_lat.min(p.lat);
            bb.max_lng = bb.max_lng.max(p.lng);
            bb.max_lat = bb.max_lat.max(p.lat);
        }
        if bb.max_lng <= bb.min_lng {
            bb.max_lng = bb.min_lng + 1e-6;
        }
        if bb.max_lat <= bb.min_lat {
            bb.max_lat = bb.min_lat + 1e-6;
        }
        Some(bb)
    }

    /// Grid cell of `p`, clamped so points on the max edges land in the last cell.
    fn cell(&self, p: &GeoPoint, grid: usize) -> usize {
        let fx = (p.lng - self.min_lng) / (self.max_lng - self.min_lng);
        let fy = (p.lat - self.min_lat) / (self.max_lat - self.min_lat);
        let ix = ((fx * grid as f64).floor().max(0.0) as usize).min(grid - 1);
        let iy = ((fy * grid as f64).floor().max(0.0) as usize).min(grid - 1);
        iy * grid + ix
    }
}

/// Normalized histogram of every point of `ds` over a `grid x grid` partition of `bbox`.
pub fn density_histogram(ds: &TrajectoryDataset, bbox: &BBox, grid: usize) -> Result<Vec<f64>, MetricError> {
    bbox.validate()?;
    let mut counts = vec![0usize; grid * grid];
    let mut total = 0usize;
    for t in ds.iter() {
        for p in &t.points {
            counts[bbox.cell(&p.pos, grid)] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(MetricError::EmptyDataset);
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Jensen-Shannon divergence in nats, with `0 ln 0 = 0`.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (x / (0.5 * (x + y))).ln())
            .sum()
    };
    let v = 0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p);
    v.clamp(0.0, std::f64::consts::LN_2)
}

/// JSD between the 16x16 point-density grids of two datasets.
pub fn density_jsd(gen: &TrajectoryDataset, reference: &TrajectoryDataset, bbox: &BBox) -> Result<f64, MetricError> {
    let p = density_histogram(gen, bbox, DENSITY_GRID)?;
    let q = density_histogram(reference, bbox, DENSITY_GRID)?;
    Ok(jsd(&p, &q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `recovery` or `prediction`.
    pub task: String,
    pub mae_m: f64,
    pub rmse_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density_jsd: Option<f64>,
    pub n_points: usize,
    pub n_trajectories: usize,
    /// Means of per-trajectory errors, for comparison with per-point averages.
    pub per_trajectory_mae_m: f64,
    pub per_trajectory_rmse_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl MetricReport {
    pub fn check(&self) -> bool {
        self.mae_m >= 0.0
            && self.rmse_m >= self.mae_m - 1e-9 * self.mae_m.max(1.0)
            && self.accuracy.is_none_or(|a| (0.0..=1.0).contains(&a))
            && self.density_jsd.is_none_or(|j| (0.0..=std::f64::consts::LN_2).contains(&j))
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        writeln!(f, "{:<24}{:>16}", "metric", "value")?;
        writeln!(f, "{:<24}{:>16}", "task", self.task)?;
        writeln!(f, "{:<24}{:>16.3}", "mae_m", self.mae_m)?;
        writeln!(f, "{:<24}{:>16.3}", "rmse_m", self.rmse_m)?;
        writeln!(f, "{:<24}{:>16.3}", "per_trajectory_mae_m", self.per_trajectory_mae_m)?;
        writeln!(f, "{:<24}{:>16.3}", "per_trajectory_rmse_m", self.per_trajectory_rmse_m)?;
        writeln!(f, "{:<24}{:>16}", "accuracy", opt(self.accuracy))?;
        writeln!(f, "{:<24}{:>16}", "density_jsd", opt(self.density_jsd))?;
        writeln!(f, "{:<24}{:>16}", "n_points", self.n_points)?;
        write!(f, "{:<24}{:>16}", "n_trajectories", self.n_trajectories)
    }
}
