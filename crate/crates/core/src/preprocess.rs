//! Normalization to a 1 Hz grid followed by rule-based filtering.
//!
//! The pipeline per input trajectory is
//! `normalize_1hz -> map-matching hook -> apply_filters`. Normalization may
//! split a trajectory at long gaps, so the unit of accounting in
//! [`FilterReport`] is a *candidate*: one normalized fragment, or one input
//! that produced no fragment at all (counted under [`RejectRule::Empty`]).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_m, speed_kmh, GeoPoint};
use crate::trajectory::{TrajPoint, Trajectory, TrajectoryDataset};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("invalid filter policy: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterPolicy {
    pub min_points: usize,
    pub min_distance_m: f64,
    pub max_speed_kmh: f64,
    pub min_speed_kmh: f64,
    /// Longest run of below-minimum-speed seconds tolerated as a stop.
    pub max_dwell_s: usize,
    pub loop_endpoint_m: f64,
    pub loop_min_path_m: f64,
    pub max_gap_s: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            min_points: 32,
            min_distance_m: 100.0,
            max_speed_kmh: 120.0,
            min_speed_kmh: 0.5,
            max_dwell_s: 10,
            loop_endpoint_m: 100.0,
            loop_min_path_m: 1000.0,
            max_gap_s: 15.0,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let positive = [
            ("min_distance_m", self.min_distance_m),
            ("max_speed_kmh", self.max_speed_kmh),
            ("min_speed_kmh", self.min_speed_kmh),
            ("loop_endpoint_m", self.loop_endpoint_m),
            ("loop_min_path_m", self.loop_min_path_m),
            ("max_gap_s", self.max_gap_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PolicyError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.min_points == 0 {
            return Err(PolicyError::Invalid("min_points must be positive".into()));
        }
        if self.min_speed_kmh >= self.max_speed_kmh {
            return Err(PolicyError::Invalid("min_speed_kmh must be below max_speed_kmh".into()));
        }
        Ok(())
    }
}

/// Why a candidate was dropped. Declaration order is evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectRule {
    /// Normalization left no fragment with two or more points.
    Empty,
    Length,
    Distance,
    Speed,
    Loop,
}

impl RejectRule {
    pub fn name(self) -> &'static str {
        match self {
            RejectRule::Empty => "empty",
            RejectRule::Length => "length",
            RejectRule::Distance => "distance",
            RejectRule::Speed => "speed",
            RejectRule::Loop => "loop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Accept,
    Reject(RejectRule),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterReport {
    pub inputs: usize,
    pub candidates: usize,
    pub kept: usize,
    pub rejected_by_rule: BTreeMap<String, usize>,
}

impl FilterReport {
    pub fn rejected(&self) -> usize {
        self.rejected_by_rule.values().sum()
    }

    pub fn rejected_for(&self, rule: RejectRule) -> usize {
        self.rejected_by_rule.get(rule.name()).copied().unwrap_or(0)
    }

    fn record(&mut self, decision: FilterDecision) {
        self.candidates += 1;
        match decision {
            FilterDecision::Accept => self.kept += 1,
            FilterDecision::Reject(rule) => *self.rejected_by_rule.entry(rule.name().to_string()).or_default() += 1,
        }
    }
}

/// Extension point for aligning points to a road network.
pub trait MapMatcher: Sync {
    fn match_trajectory(&self, traj: Trajectory) -> Trajectory;
}

/// The default matcher: returns its input.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMatcher;

impl MapMatcher for IdentityMatcher {
    fn match_trajectory(&self, traj: Trajectory) -> Trajectory {
        traj
    }
}

fn lerp(a: &GeoPoint, b: &GeoPoint, f: f64) -> GeoPoint {
    GeoPoint {
        lng: a.lng + (b.lng - a.lng) * f,
        lat: a.lat + (b.lat - a.lat) * f,
    }
}

/// Resamples onto integer seconds. The first fix inside each one-second
/// window is kept (stamped with the window's second); gaps up to
/// `max_gap_s` are filled by linear interpolation, longer gaps split the
/// trajectory. Fragments shorter than two points are discarded.
pub fn normalize_1hz(traj: &Trajectory, max_gap_s: f64) -> Vec<Trajectory> {
    // First occurrence per second.
    let mut firsts: Vec<(i64, GeoPoint)> = Vec::with_capacity(traj.len());
    for p in &traj.points {
        let sec = p.t.floor() as i64;
        if firsts.last().is_none_or(|&(s, _)| sec > s) {
            firsts.push((sec, p.pos.rounded()));
        }
    }

    let mut fragments: Vec<Vec<TrajPoint>> = Vec::new();
    let mut current: Vec<TrajPoint> = Vec::new();
    for (i, &(sec, pos)) in firsts.iter().enumerate() {
        if i > 0 {
            let (prev_sec, prev_pos) = firsts[i - 1];
            let gap = sec - prev_sec;
            if gap as f64 > max_gap_s {
                fragments.push(std::mem::take(&mut current));
            } else {
                for k in 1..gap {
                    let f = k as f64 / gap as f64;
                    current.push(TrajPoint::new(lerp(&prev_pos, &pos, f).rounded(), (prev_sec + k) as f64));
                }
            }
        }
        current.push(TrajPoint::new(pos, sec as f64));
    }
    fragments.push(current);

    let fragments: Vec<Vec<TrajPoint>> = fragments.into_iter().filter(|f| f.len() >= 2).collect();
    let single = fragments.len() == 1;
    fragments
        .into_iter()
        .enumerate()
        .map(|(k, points)| Trajectory {
            id: if single { traj.id.clone() } else { format!("{}#{k}", traj.id) },
            points,
            meta: traj.meta.clone(),
        })
        .collect()
}

/// Applies the length, distance, speed and loop rules in that order.
pub fn apply_filters(traj: &Trajectory, policy: &FilterPolicy) -> FilterDecision {
    if traj.len() < policy.min_points {
        return FilterDecision::Reject(RejectRule::Length);
    }
    let path = traj.path_length_m();
    if path < policy.min_distance_m {
        return FilterDecision::Reject(RejectRule::Distance);
    }
    let mut dwell = 0usize;
    for w in traj.points.windows(2) {
        let Ok(v) = speed_kmh(&w[0], &w[1]) else {
            return FilterDecision::Reject(RejectRule::Speed);
        };
        if v > policy.max_speed_kmh {
            return FilterDecision::Reject(RejectRule::Speed);
        }
        if v < policy.min_speed_kmh {
            dwell += (w[1].t - w[0].t).round().max(1.0) as usize;
            if dwell > policy.max_dwell_s {
                return FilterDecision::Reject(RejectRule::Speed);
            }
        } else {
            dwell = 0;
        }
    }
    let (first, last) = (&traj.points[0].pos, &traj.points[traj.len() - 1].pos);
    if haversine_m(first, last) < policy.loop_endpoint_m && path > policy.loop_min_path_m {
        return FilterDecision::Reject(RejectRule::Loop);
    }
    FilterDecision::Accept
}

pub fn run_pipeline(ds: &TrajectoryDataset, policy: &FilterPolicy) -> (TrajectoryDataset, FilterReport) {
    run_pipeline_with(ds, policy, &IdentityMatcher)
}

/// Per-trajectory work runs in parallel; results are merged in input order so
/// the output does not depend on the worker count.
pub fn run_pipeline_with<M: MapMatcher>(
    ds: &TrajectoryDataset,
    policy: &FilterPolicy,
    matcher: &M,
) -> (TrajectoryDataset, FilterReport) {
    let per_input: Vec<Vec<(Trajectory, FilterDecision)>> = ds
        .trajectories
        .par_iter()
        .map(|traj| {
            normalize_1hz(traj, policy.max_gap_s)
                .into_iter()
                .map(|frag| {
                    let frag = matcher.match_trajectory(frag);
                    let decision = apply_filters(&frag, policy);
                    (frag, decision)
                })
                .collect()
        })
        .collect();

    let mut report = FilterReport {
        inputs: ds.len(),
        ..FilterReport::default()
    };
    let mut kept = Vec::new();
    for results in per_input {
        if results.is_empty() {
            report.record(FilterDecision::Reject(RejectRule::Empty));
        }
        for (traj, decision) in results {
            report.record(decision);
            if decision == FilterDecision::Accept {
                kept.push(traj);
            }
        }
    }
    let out = TrajectoryDataset {
        trajectories: kept,
        provenance: ds.provenance.clone(),
    };
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::EARTH_RADIUS_M;

    const M_PER_DEG: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

    fn pt(lng: f64, lat: f64, t: f64) -> TrajPoint {
        TrajPoint::new(GeoPoint { lng, lat }, t)
    }

    /// Straight northward track at `speed_mps`, one point per second.
    fn straight(id: &str, n: usize, speed_mps: f64) -> Trajectory {
        let pts = (0..n)
            .map(|i| pt(0.0, i as f64 * speed_mps / M_PER_DEG, i as f64))
            .collect();
        Trajectory::new(id, pts).unwrap()
    }

    #[test]
    fn ten_hz_keeps_first_sample_per_second() {
        let pts: Vec<TrajPoint> = (0..=50).map(|i| pt(0.0, i as f64 * 1e-5, i as f64 * 0.1)).collect();
        let t = Trajectory::new("a", pts).unwrap();
        let out = normalize_1hz(&t, 15.0);
        assert_eq!(out.len(), 1);
        let o = &out[0];
        assert_eq!(o.len(), 6);
        for (k, p) in o.points.iter().enumerate() {
            assert_eq!(p.t, k as f64);
            assert!((p.pos.lat - (k * 10) as f64 * 1e-5).abs() < 1e-9);
        }
    }

    #[test]
    fn small_gap_interpolated_on_chord() {
        let t = Trajectory::new("a", vec![pt(1.0, 2.0, 0.0), pt(1.000003, 2.000006, 3.0)]).unwrap();
        let out = normalize_1hz(&t, 15.0);
        let o = &out[0];
        assert_eq!(o.len(), 4);
        assert_eq!(o.points[1], pt(1.000001, 2.000002, 1.0));
        assert_eq!(o.points[2], pt(1.000002, 2.000004, 2.0));
    }

    #[test]
    fn long_gap_splits() {
        let t = Trajectory::new(
            "a",
            vec![pt(0.0, 0.0, 0.0), pt(0.0, 0.0001, 1.0), pt(0.0, 0.001, 100.0), pt(0.0, 0.0011, 101.0)],
        )
        .unwrap();
        let out = normalize_1hz(&t, 15.0);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].id, "a#0");
        assert_eq!(out[1].id, "a#1");
        // Singleton fragments vanish.
        let t = Trajectory::new("b", vec![pt(0.0, 0.0, 0.0), pt(0.0, 0.001, 100.0)]).unwrap();
        assert!(normalize_1hz(&t, 15.0).is_empty());
    }

    #[test]
    fn length_rule() {
        let p = FilterPolicy::default();
        assert_eq!(apply_filters(&straight("a", 31, 10.0), &p), FilterDecision::Reject(RejectRule::Length));
        assert_eq!(apply_filters(&straight("a", 32, 10.0), &p), FilterDecision::Accept);
    }

    #[test]
    fn distance_rule() {
        // 40 points at 2 m/s covers 78 m.
        let p = FilterPolicy::default();
        assert_eq!(apply_filters(&straight("a", 40, 2.0), &p), FilterDecision::Reject(RejectRule::Distance));
    }

    #[test]
    fn speed_rule_fast_pair() {
        let p = FilterPolicy::default();
        let mut t = straight("a", 40, 10.0);
        // One 100 m jump in one second: 360 km/h.
        let jump = 100.0 / M_PER_DEG;
        for q in t.points.iter_mut().skip(20) {
            q.pos.lat += jump;
        }
        assert_eq!(apply_filters(&t, &p), FilterDecision::Reject(RejectRule::Speed));
    }

    #[test]
    fn dwell_tolerance() {
        let p = FilterPolicy::default();
        let build = |stop: usize| {
            let mut pts = Vec::new();
            let mut lat = 0.0;
            for i in 0..60 + stop {
                let moving = !(20..20 + stop).contains(&i);
                if moving {
                    lat += 10.0 / M_PER_DEG;
                }
                pts.push(pt(0.0, lat, i as f64));
            }
            Trajectory::new("d", pts).unwrap()
        };
        assert_eq!(apply_filters(&build(10), &p), FilterDecision::Accept);
        assert_eq!(apply_filters(&build(11), &p), FilterDecision::Reject(RejectRule::Speed));
    }

    #[test]
    fn loop_rule() {
        // 2 km circuit around a square, ending 30 m short of the start.
        let p = FilterPolicy::default();
        let side = 500.0;
        let mut pts = Vec::new();
        let mut s = 0.0;
        let mut t = 0.0;
        while s <= 4.0 * side - 30.0 {
            let (x, y) = match (s / side) as usize {
                0 => (s, 0.0),
                1 => (side, s - side),
                2 => (3.0 * side - s, side),
                _ => (0.0, 4.0 * side - s),
            };
            pts.push(pt(x / M_PER_DEG, y / M_PER_DEG, t));
            s += 10.0;
            t += 1.0;
        }
        let traj = Trajectory::new("loop", pts).unwrap();
        assert_eq!(apply_filters(&traj, &p), FilterDecision::Reject(RejectRule::Loop));
    }

    #[test]
    fn empty_pipeline() {
        let (out, report) = run_pipeline(&TrajectoryDataset::empty("x"), &FilterPolicy::default());
        assert!(out.is_empty());
        assert_eq!(report, FilterReport::default());
    }

    #[test]
    fn single_passing_trajectory() {
        let ds = TrajectoryDataset::new(vec![straight("a", 50, 10.0)], "x").unwrap();
        let (out, report) = run_pipeline(&ds, &FilterPolicy::default());
        assert_eq!(report.kept, 1);
        let mut expected = ds.trajectories[0].clone();
        expected.points.iter_mut().for_each(|p| p.pos = p.pos.rounded());
        assert_eq!(out.trajectories[0], expected);
    }

    #[test]
    fn policy_validation() {
        assert!(FilterPolicy::default().validate().is_ok());
        let bad = FilterPolicy { min_speed_kmh: 200.0, ..FilterPolicy::default() };
        assert!(bad.validate().is_err());
    }
}
