//! Downstream task adapters on top of a pretrained backbone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{encoder_backward, encoder_forward, reconstruct};
use super::ops::{linear_backward, linear_forward};
use super::params::Linear;
use super::train::Adam;
use super::{ModelError, ModelState};
use crate::geo::GeoPoint;
use crate::stm::{mask_last_count, mask_random, MaskError, MaskedTrajectory};
use crate::trajectory::Trajectory;

/// Points forecast by the prediction task.
pub const PREDICTION_HORIZON: usize = 5;
/// Fraction hidden by the recovery task.
pub const RECOVERY_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Recovery,
    Prediction,
    Classification(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneMode {
    /// Only the head is trained; the backbone stays bit-identical.
    Frozen,
    /// Head and encoder are trained together.
    FineTune,
}

/// Mean-pool over tokens, then `d -> d` with ReLU, then `d -> k` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl ClassifierHead {
    pub fn init(d: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            hidden: Linear::init(d, d, &mut rng),
            out: Linear::init(d, k, &mut rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.out.n_out
    }

    fn flat_len(&self) -> usize {
        self.hidden.w.len() + self.hidden.b.len() + self.out.w.len() + self.out.b.len()
    }

    fn to_flat(&self) -> Vec<f64> {
        [&self.hidden.w, &self.hidden.b, &self.out.w, &self.out.b]
            .into_iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    fn copy_from_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for v in [&mut self.hidden.w, &mut self.hidden.b, &mut self.out.w, &mut self.out.b] {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// A backbone paired with the head for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub backbone: ModelState,
    pub task: Task,
    pub head: Option<ClassifierHead>,
}

impl TaskModel {
    /// Recovery and prediction reuse the decoder as-is; classification
    /// attaches a fresh head seeded from the backbone seed.
    pub fn adapt(backbone: ModelState, task: Task) -> Result<Self, ModelError> {
        let head = match task {
            Task::Classification(0) => {
                return Err(ModelError::InvalidConfig("classification needs at least one class".into()))
            }
            Task::Classification(k) => Some(ClassifierHead::init(backbone.config.d_model, k, backbone.config.seed ^ 0x5eed)),
            _ => None,
        };
        Ok(Self { backbone, task, head })
    }

    /// Reconstructs every point of `masked`.
    pub fn recover(&self, masked: &MaskedTrajectory) -> Vec<GeoPoint> {
        reconstruct(&self.backbone, masked)
    }

    /// Hides the last [`PREDICTION_HORIZON`] points and returns the mask and
    /// the predicted positions at the hidden indices.
    pub fn predict(&self, traj: &Trajectory) -> Result<(MaskedTrajectory, Vec<GeoPoint>), MaskError> {
        let masked = prediction_mask(traj)?;
        let full = reconstruct(&self.backbone, &masked);
        let hidden = masked.masked.iter().map(|&i| full[i]).collect();
        Ok((masked, hidden))
    }

    pub fn logits(&self, traj: &Trajectory) -> Result<Vec<f64>, ModelError> {
        let head = self.head.as_ref().ok_or_else(|| ModelError::InvalidConfig("model has no classifier head".into()))?;
        Ok(head_forward(&self.backbone, head, traj).logits)
    }

    pub fn classify(&self, traj: &Trajectory) -> Result<usize, ModelError> {
        let logits = self.logits(traj)?;
        Ok(argmax(&logits))
    }

    /// Cross-entropy training of the head (and, in fine-tune mode, the
    /// encoder) with Adam. Returns the mean loss of each epoch.
    pub fn train_classifier(
        &mut self,
        data: &[(Trajectory, usize)],
        mode: FineTuneMode,
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>, ModelError> {
        let Some(head) = self.head.as_mut() else {
            return Err(ModelError::InvalidConfig("model has no classifier head".into()));
        };
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        if let Some((_, y)) = data.iter().find(|(_, y)| *y >= head.classes()) {
            return Err(ModelError::InvalidConfig(format!("label {y} out of range")));
        }
        let train_backbone = mode == FineTuneMode::FineTune;
        let mut theta = head.to_flat();
        let head_len = theta.len();
        if train_backbone {
            theta.extend(self.backbone.params.to_flat());
        }
        let mut adam = Adam::new(theta.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        let batch = self.backbone.config.batch_size;

        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (step, chunk) in order.chunks(batch).enumerate() {
                let mut g_head = vec![0.0; head_len];
                let mut g_back = self.backbone.params.zeros_like();
                let mut loss = 0.0;
                for &i in chunk {
                    let (traj, y) = &data[i];
                    let (l, gh) = head_gradient(&self.backbone, head, traj, *y, train_backbone.then_some(&mut g_back));
                    loss += l;
                    g_head.iter_mut().zip(&gh).for_each(|(a, b)| *a += b);
                }
                if !loss.is_finite() {
                    return Err(ModelError::NonFiniteLoss {
                        epoch,
                        step,
                        detail: "classifier cross-entropy".into(),
                    });
                }
                total += loss;
                let k = 1.0 / chunk.len() as f64;
                let mut grad: Vec<f64> = g_head.iter().map(|g| g * k).collect();
                if train_backbone {
                    grad.extend(g_back.to_flat().iter().map(|g| g * k));
                }
                adam.step(&mut theta, &grad, lr);
                head.copy_from_flat(&theta[..head_len]);
                if train_backbone {
                    self.backbone.params.copy_from_flat(&theta[head_len..]);
                }
            }
            history.push(total / data.len() as f64);
        }
        Ok(history)
    }
}

/// The mask used for prediction: the last [`PREDICTION_HORIZON`] points.
pub fn prediction_mask(traj: &Trajectory) -> Result<MaskedTrajectory, MaskError> {
    let n = traj.len();
    mask_last_count(traj, PREDICTION_HORIZON.min(n.saturating_sub(2)).max(1))
}

/// The mask used for recovery: half the points, drawn uniformly.
pub fn recovery_mask(traj: &Trajectory, seed: u64) -> Result<MaskedTrajectory, MaskError> {
    mask_random(traj, RECOVERY_RATIO, seed)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct HeadTrace {
    enc: super::network::EncoderTrace,
    pooled: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    logits: Vec<f64>,
}

fn head_forward(state: &ModelState, head: &ClassifierHead, traj: &Trajectory) -> HeadTrace {
    let n = traj.len().min(state.config.pad_len);
    let positions: Vec<usize> = (0..n).collect();
    let enc = encoder_forward(state, &traj.points[..n], &positions);
    let d = state.config.d_model;
    let mut pooled = vec![0.0; d];
    for t in 0..n {
        pooled.iter_mut().zip(enc.out.row(t)).for_each(|(p, v)| *p += v / n as f64);
    }
    let pre = linear_forward(&head.hidden, &pooled, 1);
    let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
    let logits = linear_forward(&head.out, &act, 1);
    HeadTrace { enc, pooled, pre, act, logits }
}

fn head_gradient(
    state: &ModelState,
    head: &ClassifierHead,
    traj: &Trajectory,
    label: usize,
    backbone_grad: Option<&mut super::ModelParams>,
) -> (f64, Vec<f64>) {
    let tr = head_forward(state, head, traj);
    let max = tr.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = tr.logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(exps[label] / sum).ln();
    let mut dlogits: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    dlogits[label] -= 1.0;

    let mut g = ClassifierHead {
        hidden: Linear::zeros(head.hidden.n_in, head.hidden.n_out),
        out: Linear::zeros(head.out.n_in, head.out.n_out),
    };
    let dact = linear_backward(&head.out, &mut g.out, &tr.act, &dlogits, 1);
    let dpre: Vec<f64> = dact.iter().zip(&tr.pre).map(|(d, &p)| if p > 0.0 { *d } else { 0.0 }).collect();
    let dpooled = linear_backward(&head.hidden, &mut g.hidden, &tr.pooled, &dpre, 1);

    if let Some(grad) = backbone_grad {
        let n = tr.enc.out.len();
        let dz: Vec<f64> = (0..n).flat_map(|_| dpooled.iter().map(move |v| v / n as f64)).collect();
        encoder_backward(state, &tr.enc, &dz, grad);
    }
    debug_assert_eq!(g.flat_len(), head.flat_len());
    (loss, g.to_flat())
}
