//! Adaptive trajectory resampling: length-dependent logarithmic downsampling
//! and fixed-interval thinning.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AtrError {
    #[error("invalid resample policy: {0}")]
    InvalidPolicy(String),
    #[error("interval must be at least 1 s")]
    InvalidInterval,
    #[error("resampling would leave {0} point(s); at least 2 required")]
    TooShort(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResamplePolicy {
    pub n_min: usize,
    pub n_max: usize,
    pub r_min: f64,
    /// Fixed thinning interval for pretraining samples. Unset: drawn per
    /// trajectory from the model's `intervals`.
    pub interval_dt: Option<usize>,
}

impl Default for ResamplePolicy {
    fn default() -> Self {
        Self {
            n_min: 36,
            n_max: 600,
            r_min: 0.35,
            interval_dt: None,
        }
    }
}

impl ResamplePolicy {
    pub fn new(n_min: usize, n_max: usize, r_min: f64) -> Result<Self, AtrError> {
        let p = Self { n_min, n_max, r_min, interval_dt: None };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AtrError> {
        if self.n_min < 2 || self.n_min >= self.n_max {
            return Err(AtrError::InvalidPolicy(format!(
                "need 2 <= n_min < n_max, got n_min={} n_max={}",
                self.n_min, self.n_max
            )));
        }
        if !(self.r_min > 0.0 && self.r_min <= 1.0) {
            return Err(AtrError::InvalidPolicy(format!("r_min must lie in (0, 1], got {}", self.r_min)));
        }
        if self.interval_dt == Some(0) {
            return Err(AtrError::InvalidInterval);
        }
        Ok(())
    }

    /// Upper bound on the resampled length, `round(r_min * n_max)`.
    pub fn m_max(&self) -> usize {
        (self.r_min * self.n_max as f64).round() as usize
    }
}

/// Fraction of points kept for a trajectory of `n` points.
///
/// 1 up to `n_min`, `r_min` from `n_max` on, and in between
/// `1 - (1 - r_min) * ln(n - n_min + 1) / ln(n_max - n_min + 1)`.
pub fn sampling_ratio(n: usize, policy: &ResamplePolicy) -> f64 {
    if n <= policy.n_min {
        return 1.0;
    }
    if n >= policy.n_max {
        return policy.r_min;
    }
    let phi = ((n - policy.n_min + 1) as f64).ln() / ((policy.n_max - policy.n_min + 1) as f64).ln();
    1.0 - (1.0 - policy.r_min) * phi
}

/// Number of points [`dynamic_resample`] keeps out of `n`.
pub fn resampled_len(n: usize, policy: &ResamplePolicy) -> usize {
    if n <= 2 {
        return n;
    }
    let m = (sampling_ratio(n, policy) * n as f64).round() as usize;
    m.min(policy.m_max()).clamp(2, n)
}

/// Evenly spaced indices `round(j * (n - 1) / (m - 1))` for `j in 0..m`.
/// Always contains `0` and `n - 1`; strictly increasing when `2 <= m <= n`.
pub fn stride_indices(n: usize, m: usize) -> Vec<usize> {
    if m >= n {
        return (0..n).collect();
    }
    if m <= 1 {
        return vec![0];
    }
    let step = (n - 1) as f64 / (m - 1) as f64;
    (0..m).map(|j| (j as f64 * step).round() as usize).collect()
}

/// Length-dependent downsampling keeping both endpoints and evenly strided
/// interior points. Timestamps are untouched.
pub fn dynamic_resample(traj: &Trajectory, policy: &ResamplePolicy) -> Trajectory {
    let m = resampled_len(traj.len(), policy);
    traj.select(&stride_indices(traj.len(), m))
}

/// Keeps indices `0, dt, 2*dt, ...`. On a 1 Hz trajectory every output gap
/// equals `dt` seconds.
pub fn interval_resample(traj: &Trajectory, dt: usize) -> Result<Trajectory, AtrError> {
    if dt == 0 {
        return Err(AtrError::InvalidInterval);
    }
    let indices: Vec<usize> = (0..traj.len()).step_by(dt).collect();
    if indices.len() < 2 {
        return Err(AtrError::TooShort(indices.len()));
    }
    Ok(traj.select(&indices))
}
