//! Recovery and prediction evaluation of a trained model on a dataset.

use rayon::prelude::*;

use crate::atr::{dynamic_resample, ResamplePolicy};
use crate::derive_seed;
use crate::metrics::{ErrorAccumulator, MetricError, MetricReport};
use crate::model::adapt::{prediction_mask, recovery_mask};
use crate::model::network::reconstruct;
use crate::model::{ModelError, ModelState};
use crate::stm::{MaskError, MIN_MASKABLE_LEN};
use crate::trajectory::{Trajectory, TrajectoryDataset};

const EVAL_STREAM: u64 = 0xe7a1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    Recovery,
    Prediction,
}

impl EvalTask {
    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Recovery => "recovery",
            EvalTask::Prediction => "prediction",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// The model's view of a trajectory: length-adaptive resampling, then the
/// first `pad_len` points.
pub fn model_input(traj: &Trajectory, state: &ModelState, atr: &ResamplePolicy) -> Trajectory {
    let mut t = dynamic_resample(traj, atr);
    t.points.truncate(state.config.pad_len);
    t
}

/// Masks every trajectory for `task`, reconstructs it and scores the hidden
/// points in meters. Trajectories too short to mask are skipped.
pub fn evaluate(
    state: &ModelState,
    ds: &TrajectoryDataset,
    task: EvalTask,
    atr: &ResamplePolicy,
    seed: u64,
) -> Result<MetricReport, EvalError> {
    let scored: Result<Vec<_>, EvalError> = ds
        .trajectories
        .par_iter()
        .enumerate()
        .filter_map(|(k, traj)| {
            let input = model_input(traj, state, atr);
            if input.len() < MIN_MASKABLE_LEN {
                return None;
            }
            let masked = match task {
                EvalTask::Recovery => recovery_mask(&input, derive_seed(seed, EVAL_STREAM, k as u64)),
                EvalTask::Prediction => prediction_mask(&input),
            };
            Some(masked.map_err(EvalError::from).map(|m| {
                let pred = reconstruct(state, &m);
                (pred, input.positions(), m.masked)
            }))
        })
        .collect();

    let mut acc = ErrorAccumulator::default();
    let scored = scored?;
    for (pred, truth, idx) in &scored {
        acc.add(pred, truth, idx)?;
    }
    let point = acc.per_point()?;
    let traj = acc.per_trajectory()?;
    Ok(MetricReport {
        task: task.name().into(),
        mae_m: point.mae_m,
        rmse_m: point.rmse_m,
        accuracy: None,
        density_jsd: None,
        n_points: point.n_points,
        n_trajectories: scored.len(),
        per_trajectory_mae_m: traj.mae_m,
        per_trajectory_rmse_m: traj.rmse_m,
        run_config: None,
    })
}
