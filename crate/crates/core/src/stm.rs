//! Self-supervised trajectory masking.
//!
//! Four strategies pick the hidden index set `I`; a seeded categorical draw
//! mixes them during training. Indices here are 0-based, so "the first
//! point" is index 0. Every strategy keeps index 0 visible (it anchors the
//! coordinate normalization) and hides between 1 and `n - 2` points.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{point_segment_distance, LocalPlane, PlanarPoint};
use crate::trajectory::{TrajPoint, Trajectory};

/// Shortest trajectory any strategy accepts.
pub const MIN_MASKABLE_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("trajectory of {0} points is too short to mask (need at least {MIN_MASKABLE_LEN})")]
    TooShort(usize),
    #[error("invalid mask spec: {0}")]
    InvalidSpec(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Random,
    Block,
    KeyPoints,
    LastN,
}

impl MaskStrategy {
    /// Order used for mixture weights.
    pub const ALL: [MaskStrategy; 4] = [
        MaskStrategy::Random,
        MaskStrategy::Block,
        MaskStrategy::KeyPoints,
        MaskStrategy::LastN,
    ];
}

/// Serialized as flat keys `mask_ratio`, `rdp_epsilon_m`, `w_random`,
/// `w_block`, `w_key` and `w_lastn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "MaskSpecRepr", into = "MaskSpecRepr")]
pub struct MaskSpec {
    pub ratio: f64,
    pub rdp_epsilon_m: f64,
    /// Mixture weights in [`MaskStrategy::ALL`] order.
    pub weights: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MaskSpecRepr {
    mask_ratio: f64,
    rdp_epsilon_m: f64,
    w_random: f64,
    w_block: f64,
    w_key: f64,
    w_lastn: f64,
}

impl Default for MaskSpecRepr {
    fn default() -> Self {
        MaskSpec::default().into()
    }
}

impl From<MaskSpecRepr> for MaskSpec {
    fn from(r: MaskSpecRepr) -> Self {
        Self {
            ratio: r.mask_ratio,
            rdp_epsilon_m: r.rdp_epsilon_m,
            weights: [r.w_random, r.w_block, r.w_key, r.w_lastn],
        }
    }
}

impl From<MaskSpec> for MaskSpecRepr {
    fn from(s: MaskSpec) -> Self {
        let [w_random, w_block, w_key, w_lastn] = s.weights;
        Self { mask_ratio: s.ratio, rdp_epsilon_m: s.rdp_epsilon_m, w_random, w_block, w_key, w_lastn }
    }
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            rdp_epsilon_m: 25.0,
            weights: [0.70, 0.05, 0.15, 0.10],
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<(), MaskError> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(MaskError::InvalidSpec(format!("ratio must lie in (0, 1), got {}", self.ratio)));
        }
        if !(self.rdp_epsilon_m >= 0.0 && self.rdp_epsilon_m.is_finite()) {
            return Err(MaskError::InvalidSpec("rdp_epsilon_m must be non-negative".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(MaskError::InvalidSpec("mixture weights must be non-negative".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MaskError::InvalidSpec(format!("mixture weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// A trajectory split into hidden and visible points.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTrajectory {
    pub base: Trajectory,
    /// Hidden indices, sorted.
    pub masked: Vec<usize>,
    /// Visible indices, sorted; `visible[j]` is the original index of the
    /// `j`-th visible point.
    pub visible: Vec<usize>,
}

impl MaskedTrajectory {
    /// Builds the split from a hidden set, checking the partition contract.
    pub fn new(base: Trajectory, mut masked: Vec<usize>) -> Result<Self, MaskError> {
        let n = base.len();
        masked.sort_unstable();
        masked.dedup();
        if masked.is_empty() || masked.len() >= n {
            return Err(MaskError::InvalidMask(format!("{} of {n} points hidden", masked.len())));
        }
        if masked[0] == 0 {
            return Err(MaskError::InvalidMask("index 0 must stay visible".into()));
        }
        if masked[masked.len() - 1] >= n {
            return Err(MaskError::InvalidMask("hidden index out of range".into()));
        }
        let mut visible = Vec::with_capacity(n - masked.len());
        let mut it = masked.iter().peekable();
        for i in 0..n {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                visible.push(i);
            }
        }
        Ok(Self { base, masked, visible })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn visible_points(&self) -> Vec<TrajPoint> {
        self.visible.iter().map(|&i| self.base.points[i]).collect()
    }

    pub fn masked_points(&self) -> Vec<TrajPoint> {
        self.masked.iter().map(|&i| self.base.points[i]).collect()
    }

    /// Re-assembles the full point sequence from the visible points and the
    /// supplied values at hidden positions.
    pub fn merge(&self, hidden: &[TrajPoint]) -> Vec<TrajPoint> {
        let mut out = vec![self.base.points[0]; self.len()];
        for (&i, p) in self.visible.iter().zip(self.visible_points()) {
            out[i] = p;
        }
        for (&i, p) in self.masked.iter().zip(hidden) {
            out[i] = *p;
        }
        out
    }
}

/// `clamp(round(r * n), 1, n - 2)`.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n.saturating_sub(2).max(1))
}

fn check_len(traj: &Trajectory) -> Result<usize, MaskError> {
    match traj.len() {
        n if n < MIN_MASKABLE_LEN => Err(MaskError::TooShort(n)),
        n => Ok(n),
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hides a uniformly drawn subset of indices `1..n`.
pub fn mask_random(traj: &Trajectory, ratio: f64, seed: u64) -> Result<MaskedTrajectory, MaskError> {
    let n = check_len(traj)?;
    let count = mask_count(n, ratio);
    let mut rng = rng_for(seed);
    let masked = index::sample(&mut rng, n - 1, count).into_iter().map(|i| i + 1).collect();
    MaskedTrajectory::new(traj.clone(), masked)
}

/// Hides one run of consecutive indices starting at `k` drawn uniformly from `1..=n-b`.
pub fn mask_block(traj: &Trajectory, ratio: f64, seed: u64) -> Result<MaskedTrajectory, MaskError> {
    let n = check_len(traj)?;
    let b = mask_count(n, ratio);
    let mut rng = rng_for(seed);
    let k = rng.random_range(1..=n - b);
    MaskedTrajectory::new(traj.clone(), (k..k + b).collect())
}

/// Hides the last `clamp(round(r * n), 1, n - 2)` points.
pub fn mask_last_n(traj: &Trajectory, ratio: f64) -> Result<MaskedTrajectory, MaskError> {
    let n = check_len(traj)?;
    mask_last_count(traj, mask_count(n, ratio))
}

/// Hides exactly the last `count` points (`1 <= count <= n - 2`).
pub fn mask_last_count(traj: &Trajectory, count: usize) -> Result<MaskedTrajectory, MaskError> {
    let n = check_len(traj)?;
    if count == 0 || count > n - 2 {
        return Err(MaskError::InvalidMask(format!("cannot hide the last {count} of {n} points")));
    }
    MaskedTrajectory::new(traj.clone(), (n - count..n).collect())
}

/// Interior indices kept by Ramer-Douglas-Peucker with tolerance `epsilon_m`,
/// measured in a local metric plane. Ties go to the lowest index.
pub fn rdp_key_points(traj: &Trajectory, epsilon_m: f64) -> Vec<usize> {
    let positions = traj.positions();
    let Some(plane) = LocalPlane::fit(&positions) else {
        return Vec::new();
    };
    let planar: Vec<PlanarPoint> = positions.iter().map(|p| plane.project(p)).collect();
    rdp_planar(&planar, epsilon_m)
}

/// RDP over planar points; explicit stack instead of recursion.
pub fn rdp_planar(points: &[PlanarPoint], epsilon: f64) -> Vec<usize> {
    let n = points.len();
    if n < 3 {
        return Vec::new();
    }
    let mut keys = Vec::new();
    let mut stack = vec![(0usize, n - 1)];
    while let Some((s, e)) = stack.pop() {
        let mut d_max = 0.0;
        let mut k = None;
        for i in s + 1..e {
            let d = point_segment_distance(points[i], points[s], points[e]);
            if d > d_max {
                d_max = d;
                k = Some(i);
            }
        }
        if let Some(k) = k {
            if d_max > epsilon {
                keys.push(k);
                stack.push((s, k));
                stack.push((k, e));
            }
        }
    }
    keys.sort_unstable();
    keys
}

/// Hides RDP key points. More keys than the mask budget are subsampled
/// uniformly; fewer are topped up with uniformly drawn non-key interior
/// indices, so an empty key set degenerates to random masking.
pub fn mask_key_points(
    traj: &Trajectory,
    ratio: f64,
    epsilon_m: f64,
    seed: u64,
) -> Result<MaskedTrajectory, MaskError> {
    let n = check_len(traj)?;
    let budget = mask_count(n, ratio);
    let keys = rdp_key_points(traj, epsilon_m);
    let mut rng = rng_for(seed);
    let masked: Vec<usize> = if keys.len() >= budget {
        index::sample(&mut rng, keys.len(), budget).into_iter().map(|j| keys[j]).collect()
    } else {
        let others: Vec<usize> = (1..n).filter(|i| keys.binary_search(i).is_err()).collect();
        let extra = index::sample(&mut rng, others.len(), budget - keys.len());
        keys.iter().copied().chain(extra.into_iter().map(|j| others[j])).collect()
    };
    MaskedTrajectory::new(traj.clone(), masked)
}

/// Draws one strategy according to the mixture weights.
pub fn sample_strategy<R: Rng + ?Sized>(spec: &MaskSpec, rng: &mut R) -> Result<MaskStrategy, MaskError> {
    let dist = WeightedIndex::new(spec.weights).map_err(|e| MaskError::InvalidSpec(e.to_string()))?;
    Ok(MaskStrategy::ALL[dist.sample(rng)])
}

/// Seeded stream of strategies; equal seeds give equal sequences.
pub struct StrategySampler {
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl StrategySampler {
    pub fn new(spec: &MaskSpec, seed: u64) -> Result<Self, MaskError> {
        spec.validate()?;
        let dist = WeightedIndex::new(spec.weights).map_err(|e| MaskError::InvalidSpec(e.to_string()))?;
        Ok(Self { dist, rng: rng_for(seed) })
    }
}

impl Iterator for StrategySampler {
    type Item = MaskStrategy;

    fn next(&mut self) -> Option<MaskStrategy> {
        Some(MaskStrategy::ALL[self.dist.sample(&mut self.rng)])
    }
}

/// Applies one strategy with the spec's ratio and tolerance.
pub fn apply_strategy(
    strategy: MaskStrategy,
    traj: &Trajectory,
    spec: &MaskSpec,
    seed: u64,
) -> Result<MaskedTrajectory, MaskError> {
    match strategy {
        MaskStrategy::Random => mask_random(traj, spec.ratio, seed),
        MaskStrategy::Block => mask_block(traj, spec.ratio, seed),
        MaskStrategy::KeyPoints => mask_key_points(traj, spec.ratio, spec.rdp_epsilon_m, seed),
        MaskStrategy::LastN => mask_last_n(traj, spec.ratio),
    }
}
