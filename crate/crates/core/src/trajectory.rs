//! Trajectory value types shared by every stage.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoPoint;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("trajectory `{0}` has fewer than 2 points")]
    TooFewPoints(String),
    #[error("trajectory `{id}`: timestamps not strictly increasing at point {index}")]
    NonIncreasingTime { id: String, index: usize },
    #[error("trajectory `{id}`: point {index} has out-of-range coordinates")]
    InvalidCoordinate { id: String, index: usize },
    #[error("duplicate trajectory id `{0}`")]
    DuplicateId(String),
}

/// One timestamped fix. `t` is seconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajPoint {
    pub pos: GeoPoint,
    pub t: f64,
}

impl TrajPoint {
    pub fn new(pos: GeoPoint, t: f64) -> Self {
        Self { pos, t }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub points: Vec<TrajPoint>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Trajectory {
    /// Builds a trajectory, checking coordinate ranges, strict time order and `n >= 2`.
    pub fn new(id: impl Into<String>, points: Vec<TrajPoint>) -> Result<Self, TrajectoryError> {
        let traj = Self {
            id: id.into(),
            points,
            meta: BTreeMap::new(),
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn with_meta(mut self, meta: BTreeMap<String, String>) -> Self {
        self.meta = meta;
        self
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.points.len() < 2 {
            return Err(TrajectoryError::TooFewPoints(self.id.clone()));
        }
        for (i, p) in self.points.iter().enumerate() {
            if !GeoPoint::in_range(p.pos.lng, p.pos.lat) || !p.t.is_finite() {
                return Err(TrajectoryError::InvalidCoordinate {
                    id: self.id.clone(),
                    index: i,
                });
            }
        }
        if let Some(i) = self.points.windows(2).position(|w| w[1].t <= w[0].t) {
            return Err(TrajectoryError::NonIncreasingTime {
                id: self.id.clone(),
                index: i + 1,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<GeoPoint> {
        self.points.iter().map(|p| p.pos).collect()
    }

    pub fn path_length_m(&self) -> f64 {
        crate::geo::path_length_m(self.points.iter().map(|p| &p.pos))
    }

    /// Copy of this trajectory keeping only the points at `indices` (assumed sorted).
    pub fn select(&self, indices: &[usize]) -> Trajectory {
        Trajectory {
            id: self.id.clone(),
            points: indices.iter().map(|&i| self.points[i]).collect(),
            meta: self.meta.clone(),
        }
    }
}

/// A collection of trajectories with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryDataset {
    pub trajectories: Vec<Trajectory>,
    pub provenance: String,
}

impl TrajectoryDataset {
    pub fn new(trajectories: Vec<Trajectory>, provenance: impl Into<String>) -> Result<Self, TrajectoryError> {
        let mut seen = HashSet::with_capacity(trajectories.len());
        for t in &trajectories {
            if !seen.insert(t.id.as_str()) {
                return Err(TrajectoryError::DuplicateId(t.id.clone()));
            }
        }
        Ok(Self {
            trajectories,
            provenance: provenance.into(),
        })
    }

    pub fn empty(provenance: impl Into<String>) -> Self {
        Self {
            trajectories: Vec::new(),
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn point_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trajectory> {
        self.trajectories.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lng: f64, lat: f64, t: f64) -> TrajPoint {
        TrajPoint::new(GeoPoint { lng, lat }, t)
    }

    #[test]
    fn rejects_singleton_and_unordered() {
        assert!(matches!(
            Trajectory::new("a", vec![pt(0.0, 0.0, 0.0)]),
            Err(TrajectoryError::TooFewPoints(_))
        ));
        assert!(matches!(
            Trajectory::new("a", vec![pt(0.0, 0.0, 1.0), pt(0.0, 0.0, 1.0)]),
            Err(TrajectoryError::NonIncreasingTime { index: 1, .. })
        ));
        assert!(Trajectory::new("a", vec![pt(0.0, 0.0, 1.0), pt(0.0, 91.0, 2.0)]).is_err());
    }

    #[test]
    fn dataset_ids_unique() {
        let t = Trajectory::new("x", vec![pt(0.0, 0.0, 0.0), pt(0.0, 0.0, 1.0)]).unwrap();
        assert!(matches!(
            TrajectoryDataset::new(vec![t.clone(), t], "test"),
            Err(TrajectoryError::DuplicateId(_))
        ));
    }
}
