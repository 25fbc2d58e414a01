//! Seeded synthetic trajectories: random waypoints, constant speed per leg,
//! 1 Hz sampling and temporally correlated positional noise.
//!
//! The noise is an Ornstein-Uhlenbeck process per axis with stationary
//! standard deviation `noise_sigma_m` and correlation time `noise_corr_s`,
//! so a fix drifts rather than jumps. A draw that the default filters would
//! reject is discarded and redrawn from the same stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::geo::{haversine_m, GeoPoint, EARTH_RADIUS_M};
use crate::metrics::BBox;
use crate::preprocess::{apply_filters, normalize_1hz, FilterDecision, FilterPolicy};
use crate::trajectory::{TrajPoint, Trajectory, TrajectoryDataset};

const M_PER_DEG: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
const SYNTH_STREAM: u64 = 0x53594e;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("trajectory {0} failed the default filters after {1} attempts")]
    Exhausted(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_traj: usize,
    pub min_waypoints: usize,
    pub max_waypoints: usize,
    pub min_speed_kmh: f64,
    pub max_speed_kmh: f64,
    pub noise_sigma_m: f64,
    pub noise_corr_s: f64,
    pub bbox: BBox,
    /// Unix time of the first fix of trajectory 0; later ones start an hour apart.
    pub start_time: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_traj: 100,
            min_waypoints: 3,
            max_waypoints: 8,
            min_speed_kmh: 20.0,
            max_speed_kmh: 80.0,
            noise_sigma_m: 5.0,
            noise_corr_s: 30.0,
            bbox: BBox {
                min_lng: 116.30,
                min_lat: 39.90,
                max_lng: 116.32,
                max_lat: 39.92,
            },
            start_time: 1_700_000_000.0,
            max_attempts: 1000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.min_waypoints < 2 || self.min_waypoints > self.max_waypoints {
            return bad(format!(
                "need 2 <= min_waypoints <= max_waypoints, got {} / {}",
                self.min_waypoints, self.max_waypoints
            ));
        }
        let f = FilterPolicy::default();
        if !(self.min_speed_kmh >= f.min_speed_kmh
            && self.min_speed_kmh <= self.max_speed_kmh
            && self.max_speed_kmh <= f.max_speed_kmh)
        {
            return bad(format!(
                "speed range must lie within [{}, {}] km/h",
                f.min_speed_kmh, f.max_speed_kmh
            ));
        }
        if !(self.noise_sigma_m >= 0.0 && self.noise_sigma_m.is_finite()) {
            return bad("noise_sigma_m must be non-negative".into());
        }
        if !(self.noise_corr_s > 0.0) {
            return bad("noise_corr_s must be positive".into());
        }
        if self.bbox.validate().is_err() || !GeoPoint::in_range(self.bbox.max_lng, self.bbox.max_lat)
            || !GeoPoint::in_range(self.bbox.min_lng, self.bbox.min_lat)
        {
            return bad("bbox must be a non-empty WGS84 box".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }

    /// Standard deviation of the per-second noise increment on one axis.
    pub fn noise_step_sigma_m(&self) -> f64 {
        let a = (-1.0 / self.noise_corr_s).exp();
        self.noise_sigma_m * (2.0 * (1.0 - a)).sqrt()
    }
}

/// Waypoints, per-leg speeds and the noiseless track of one draw.
#[derive(Debug, Clone)]
pub struct Route {
    pub waypoints: Vec<GeoPoint>,
    pub speeds_mps: Vec<f64>,
    /// Time at which each waypoint is reached, starting from 0.
    pub arrival_s: Vec<f64>,
}

impl Route {
    fn draw<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Self {
        let bb = &spec.bbox;
        let w = rng.random_range(spec.min_waypoints..=spec.max_waypoints);
        let waypoints: Vec<GeoPoint> = (0..w)
            .map(|_| GeoPoint {
                lng: rng.random_range(bb.min_lng..=bb.max_lng),
                lat: rng.random_range(bb.min_lat..=bb.max_lat),
            })
            .collect();
        let speeds_mps: Vec<f64> = (1..w)
            .map(|_| rng.random_range(spec.min_speed_kmh..=spec.max_speed_kmh) / 3.6)
            .collect();
        let mut arrival_s = vec![0.0];
        for (leg, v) in waypoints.windows(2).zip(&speeds_mps) {
            let t = arrival_s.last().unwrap() + haversine_m(&leg[0], &leg[1]) / v;
            arrival_s.push(t);
        }
        Self { waypoints, speeds_mps, arrival_s }
    }

    pub fn duration_s(&self) -> f64 {
        *self.arrival_s.last().unwrap()
    }

    /// Leg index and position at time `t` (clamped to the route).
    pub fn at(&self, t: f64) -> (usize, GeoPoint) {
        let legs = self.waypoints.len() - 1;
        let mut leg = 0;
        while leg + 1 < legs && t > self.arrival_s[leg + 1] {
            leg += 1;
        }
        let (t0, t1) = (self.arrival_s[leg], self.arrival_s[leg + 1]);
        let f = if t1 > t0 { ((t - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (self.waypoints[leg], self.waypoints[leg + 1]);
        (
            leg,
            GeoPoint {
                lng: a.lng + (b.lng - a.lng) * f,
                lat: a.lat + (b.lat - a.lat) * f,
            },
        )
    }
}

/// One draw: the route and the sampled trajectory.
pub fn draw_one<R: Rng>(spec: &SynthSpec, rng: &mut R, id: &str, t0: f64) -> (Route, Trajectory) {
    let route = Route::draw(spec, rng);
    let steps = route.duration_s().floor() as usize;
    let a = (-1.0 / spec.noise_corr_s).exp();
    let kick = (1.0 - a * a).sqrt();
    let sigma = spec.noise_sigma_m;
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let mut noise = [sigma * normal(), sigma * normal()];
    let mut points = Vec::with_capacity(steps + 1);
    for s in 0..=steps {
        if s > 0 {
            for v in noise.iter_mut() {
                *v = a * *v + sigma * kick * normal();
            }
        }
        let (_, p) = route.at(s as f64);
        let pos = if sigma > 0.0 {
            GeoPoint {
                lng: p.lng + noise[0] / (M_PER_DEG * p.lat.to_radians().cos()),
                lat: p.lat + noise[1] / M_PER_DEG,
            }
        } else {
            p
        };
        points.push(TrajPoint::new(pos, t0 + s as f64));
    }
    let traj = Trajectory {
        id: id.to_string(),
        points,
        meta: [("source".to_string(), "synth".to_string())].into_iter().collect(),
    };
    (route, traj)
}

/// Accepts a draw only if it passes the default filters both as generated
/// and after 1 Hz normalization (which rounds coordinates).
fn passes(traj: &Trajectory) -> bool {
    let policy = FilterPolicy::default();
    if traj.len() < 2 || apply_filters(traj, &policy) != FilterDecision::Accept {
        return false;
    }
    let norm = normalize_1hz(traj, policy.max_gap_s);
    norm.len() == 1 && norm[0].len() == traj.len() && apply_filters(&norm[0], &policy) == FilterDecision::Accept
}

/// The `index`-th trajectory of the dataset described by `spec`.
pub fn generate_one(spec: &SynthSpec, index: usize) -> Result<(Route, Trajectory), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, SYNTH_STREAM, index as u64));
    let id = format!("synth-{index:06}");
    let t0 = spec.start_time + 3600.0 * index as f64;
    for _ in 0..spec.max_attempts {
        let (route, traj) = draw_one(spec, &mut rng, &id, t0);
        if passes(&traj) {
            return Ok((route, traj));
        }
    }
    Err(SynthError::Exhausted(index, spec.max_attempts))
}

/// Generates `spec.n_traj` trajectories. Each index has its own random
/// stream, so the result does not depend on the worker count.
pub fn generate(spec: &SynthSpec) -> Result<TrajectoryDataset, SynthError> {
    spec.validate()?;
    let trajs: Result<Vec<Trajectory>, SynthError> =
        (0..spec.n_traj).into_par_iter().map(|k| generate_one(spec, k).map(|(_, t)| t)).collect();
    Ok(TrajectoryDataset {
        trajectories: trajs?,
        provenance: format!("synth seed={} n={}", spec.seed, spec.n_traj),
    })
}
