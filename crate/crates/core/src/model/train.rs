//! Masked-reconstruction pretraining: Adam with cosine decay, a held-out
//! validation split and early stopping.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{batch_loss, gradients};
use super::{ModelConfig, ModelError, ModelState};
use crate::atr::{dynamic_resample, interval_resample, ResamplePolicy};
use crate::derive_seed;
use crate::stm::{apply_strategy, sample_strategy, MaskSpec, MaskedTrajectory, MIN_MASKABLE_LEN};
use crate::trajectory::{Trajectory, TrajectoryDataset};

const SPLIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const PREP_STREAM: u64 = 3;
const VAL_STREAM: u64 = 4;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub state: ModelState,
    /// Row 0 holds the untrained model's losses.
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn initial_val_loss(&self) -> f64 {
        self.history[0].val_loss
    }

    pub fn best_val_loss(&self) -> f64 {
        self.history[self.best_epoch].val_loss
    }
}

pub fn write_loss_csv<W: Write>(history: &[EpochLoss], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,val_loss")?;
    for row in history {
        writeln!(out, "{},{},{}", row.epoch, row.train_loss, row.val_loss)?;
    }
    Ok(())
}

/// Resample, cut to `pad_len` and mask one trajectory for training.
/// Returns `None` when the result is too short to mask.
pub fn prepare_sample(
    traj: &Trajectory,
    config: &ModelConfig,
    atr: &ResamplePolicy,
    spec: &MaskSpec,
    seed: u64,
) -> Result<Option<MaskedTrajectory>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn = config.intervals[rng.random_range(0..config.intervals.len())];
    let dt = atr.interval_dt.unwrap_or(drawn);
    let dense = dynamic_resample(traj, atr);
    let mut t = match interval_resample(&dense, dt) {
        Ok(t) if t.len() >= MIN_MASKABLE_LEN => t,
        _ => dense,
    };
    t.points.truncate(config.pad_len);
    if t.len() < MIN_MASKABLE_LEN {
        return Ok(None);
    }
    let strategy = sample_strategy(spec, &mut rng)?;
    Ok(Some(apply_strategy(strategy, &t, spec, rng.random())?))
}

fn prepare_all(
    trajs: &[&Trajectory],
    config: &ModelConfig,
    atr: &ResamplePolicy,
    spec: &MaskSpec,
    stream: u64,
    epoch: usize,
) -> Result<Vec<MaskedTrajectory>, ModelError> {
    let base = derive_seed(config.seed, stream, epoch as u64);
    let prepared: Result<Vec<_>, _> = trajs
        .par_iter()
        .enumerate()
        .map(|(k, t)| prepare_sample(t, config, atr, spec, derive_seed(base, 0, k as u64)))
        .collect();
    Ok(prepared?.into_iter().flatten().collect())
}

/// Seeded train/validation split by trajectory. A single trajectory serves as both.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 {
        return (idx.clone(), idx);
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, SPLIT_STREAM, 0)));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub(crate) fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub(crate) fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Cosine decay from `lr` to `lr * lr_floor` over `total` steps.
pub fn cosine_lr(config: &ModelConfig, step: usize, total: usize) -> f64 {
    let progress = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
    let floor = config.lr_floor;
    config.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub fn train(
    ds: &TrajectoryDataset,
    config: &ModelConfig,
    atr: &ResamplePolicy,
    spec: &MaskSpec,
) -> Result<TrainOutcome, ModelError> {
    train_with(ds, config, atr, spec, &mut |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch (including the untrained row 0).
pub fn train_with(
    ds: &TrajectoryDataset,
    config: &ModelConfig,
    atr: &ResamplePolicy,
    spec: &MaskSpec,
    on_epoch: &mut dyn FnMut(&EpochLoss),
) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    spec.validate()?;
    atr.validate().map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    if ds.is_empty() {
        return Err(ModelError::EmptyDataset);
    }

    let (train_idx, val_idx) = split_indices(ds.len(), config.val_fraction, config.seed);
    let train_set: Vec<&Trajectory> = train_idx.iter().map(|&i| &ds.trajectories[i]).collect();
    let val_set: Vec<&Trajectory> = val_idx.iter().map(|&i| &ds.trajectories[i]).collect();
    let val = prepare_all(&val_set, config, atr, spec, VAL_STREAM, 0)?;
    if val.is_empty() {
        return Err(ModelError::EmptyDataset);
    }

    let mut state = ModelState::init(config.clone())?;
    let mut theta = state.params.to_flat();
    let mut adam = Adam::new(theta.len());

    let untrained_train = prepare_all(&train_set, config, atr, spec, PREP_STREAM, 0)?;
    if untrained_train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let row0 = EpochLoss {
        epoch: 0,
        train_loss: batch_loss(&state, &untrained_train),
        val_loss: batch_loss(&state, &val),
    };
    check_finite(row0.val_loss, 0, 0, "untrained validation loss")?;
    on_epoch(&row0);
    let mut history = vec![row0];

    let steps_per_epoch = untrained_train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut step = 0usize;
    let mut best = (0usize, row0.val_loss, state.params.clone());
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let mut samples = prepare_all(&train_set, config, atr, spec, PREP_STREAM, epoch)?;
        samples.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SHUFFLE_STREAM, epoch as u64)));

        let mut loss_sum = 0.0;
        for (b, batch) in samples.chunks(config.batch_size).enumerate() {
            let (loss, grad) = gradients(&state, batch);
            check_finite(loss, epoch, b, "batch loss")?;
            if !grad.all_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    step: b,
                    detail: "non-finite gradient".into(),
                });
            }
            loss_sum += loss * batch.len() as f64;
            adam.step(&mut theta, &grad.to_flat(), cosine_lr(config, step.min(total_steps), total_steps));
            state.params.copy_from_flat(&theta);
            step += 1;
        }

        state.epoch = epoch;
        let row = EpochLoss {
            epoch,
            train_loss: loss_sum / samples.len() as f64,
            val_loss: batch_loss(&state, &val),
        };
        check_finite(row.val_loss, epoch, steps_per_epoch, "validation loss")?;
        log::info!(
            "epoch {epoch}: train {:.6e} val {:.6e}",
            row.train_loss,
            row.val_loss
        );
        on_epoch(&row);
        history.push(row);

        if row.val_loss < best.1 {
            best = (epoch, row.val_loss, state.params.clone());
        } else if epoch - best.0 >= config.patience {
            stopped_early = true;
            break;
        }
    }

    state.params = best.2;
    state.epoch = best.0;
    Ok(TrainOutcome {
        state,
        history,
        best_epoch: best.0,
        stopped_early,
    })
}

fn check_finite(loss: f64, epoch: usize, step: usize, what: &str) -> Result<(), ModelError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFiniteLoss {
            epoch,
            step,
            detail: format!("{what} = {loss}"),
        })
    }
}
