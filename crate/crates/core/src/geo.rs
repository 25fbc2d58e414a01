//! Geodesic and planar primitives.
//!
//! Distances on the sphere use the haversine formula with a mean Earth
//! radius. Planar work (RDP deviation) happens in a local equirectangular
//! frame measured in meters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::TrajPoint;

/// Mean Earth radius in meters (spherical model).
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("coordinate out of range: lng={lng}, lat={lat}")]
    OutOfRange { lng: f64, lat: f64 },
    #[error("time interval must be positive, got {0} s")]
    ZeroOrNegativeInterval(f64),
}

/// A WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lng: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lng: f64, lat: f64) -> Result<Self, GeoError> {
        if Self::in_range(lng, lat) {
            Ok(Self { lng, lat })
        } else {
            Err(GeoError::OutOfRange { lng, lat })
        }
    }

    pub fn in_range(lng: f64, lat: f64) -> bool {
        lng.is_finite() && lat.is_finite() && (-180.0..=180.0).contains(&lng) && (-90.0..=90.0).contains(&lat)
    }

    /// Rounds both coordinates to 6 decimal places (~0.1 m).
    pub fn rounded(self) -> Self {
        Self {
            lng: round6(self.lng),
            lat: round6(self.lat),
        }
    }
}

/// Rounds to 6 decimal places.
pub fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Great-circle distance in meters.
pub fn haversine_m(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlng = (b.lng - a.lng).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlng / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Sum of consecutive haversine distances.
pub fn path_length_m<'a, I>(points: I) -> f64
where
    I: IntoIterator<Item = &'a GeoPoint>,
{
    let mut iter = points.into_iter();
    let Some(mut prev) = iter.next() else {
        return 0.0;
    };
    let mut total = 0.0;
    for p in iter {
        total += haversine_m(prev, p);
        prev = p;
    }
    total
}

/// Point-to-point speed in km/h.
pub fn speed_kmh(a: &TrajPoint, b: &TrajPoint) -> Result<f64, GeoError> {
    let dt = b.t - a.t;
    if dt <= 0.0 || dt.is_nan() {
        return Err(GeoError::ZeroOrNegativeInterval(dt));
    }
    Ok(haversine_m(&a.pos, &b.pos) / dt * 3.6)
}

/// A point in a local metric plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarPoint {
    pub x: f64,
    pub y: f64,
}

impl PlanarPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &PlanarPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Perpendicular distance from `p` to the infinite line through `a` and `b`.
/// A degenerate segment (`a == b`) falls back to the distance `|p - a|`.
pub fn point_segment_distance(p: PlanarPoint, a: PlanarPoint, b: PlanarPoint) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len = dx.hypot(dy);
    if len == 0.0 {
        return p.distance(&a);
    }
    ((p.x - a.x) * dy - (p.y - a.y) * dx).abs() / len
}

/// Local equirectangular projection: x east, y north, in meters, around an origin.
#[derive(Debug, Clone, Copy)]
pub struct LocalPlane {
    origin: GeoPoint,
    cos_lat: f64,
}

impl LocalPlane {
    pub fn new(origin: GeoPoint, reference_lat: f64) -> Self {
        Self {
            origin,
            cos_lat: reference_lat.to_radians().cos(),
        }
    }

    /// Plane anchored at the first point, scaled by the mean latitude of `points`.
    pub fn fit(points: &[GeoPoint]) -> Option<Self> {
        let first = *points.first()?;
        let mean_lat = points.iter().map(|p| p.lat).sum::<f64>() / points.len() as f64;
        Some(Self::new(first, mean_lat))
    }

    pub fn project(&self, p: &GeoPoint) -> PlanarPoint {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        PlanarPoint {
            x: (p.lng - self.origin.lng) * self.cos_lat * k,
            y: (p.lat - self.origin.lat) * k,
        }
    }

    pub fn unproject(&self, p: &PlanarPoint) -> GeoPoint {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        GeoPoint {
            lng: self.origin.lng + p.x / (self.cos_lat * k),
            lat: self.origin.lat + p.y / k,
        }
    }
}
