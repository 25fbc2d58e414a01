//! Newline-delimited JSON interchange.
//!
//! One trajectory per line:
//!
//! ```text
//! {"id":"a","points":[[116.3,39.9,1577836800],...],"meta":{"creator":"x"}}
//! ```
//!
//! Coordinates are written rounded to 6 decimal places; integral timestamps
//! are written as JSON integers.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{round6, GeoPoint};
use crate::trajectory::{TrajPoint, Trajectory, TrajectoryDataset};

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize)]
#[serde(untagged)]
enum Time {
    Int(i64),
    Real(f64),
}

impl Time {
    fn from_secs(t: f64) -> Self {
        if t.fract() == 0.0 && t.abs() < 9.0e15 {
            Time::Int(t as i64)
        } else {
            Time::Real(t)
        }
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    points: Vec<(f64, f64, Time)>,
    meta: &'a BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    id: String,
    points: Vec<[f64; 3]>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

pub fn to_line(traj: &Trajectory) -> String {
    let rec = RecordOut {
        id: &traj.id,
        points: traj
            .points
            .iter()
            .map(|p| (round6(p.pos.lng), round6(p.pos.lat), Time::from_secs(p.t)))
            .collect(),
        meta: &traj.meta,
    };
    serde_json::to_string(&rec).expect("trajectory record serializes")
}

pub fn write_jsonl<W: Write>(ds: &TrajectoryDataset, mut sink: W) -> std::io::Result<()> {
    for traj in &ds.trajectories {
        sink.write_all(to_line(traj).as_bytes())?;
        sink.write_all(b"\n")?;
    }
    sink.flush()
}

/// Parses one line. `line_no` is 1-based and only used for error reporting.
pub fn parse_line(line: &str, line_no: usize) -> Result<Trajectory, JsonlError> {
    let violation = |message: String| JsonlError::SchemaViolation { line: line_no, message };
    let rec: RecordIn = serde_json::from_str(line).map_err(|e| violation(e.to_string()))?;
    let points = rec
        .points
        .iter()
        .map(|&[lng, lat, t]| {
            GeoPoint::new(lng, lat)
                .map(|pos| TrajPoint::new(pos, t))
                .map_err(|e| violation(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let traj = Trajectory {
        id: rec.id,
        points,
        meta: rec.meta,
    };
    traj.validate().map_err(|e| violation(e.to_string()))?;
    Ok(traj)
}

pub fn read_jsonl<R: BufRead>(source: R, provenance: &str) -> Result<TrajectoryDataset, JsonlError> {
    let mut trajectories = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj = parse_line(&line, i + 1)?;
        if !ids.insert(traj.id.clone()) {
            return Err(JsonlError::SchemaViolation {
                line: i + 1,
                message: format!("duplicate trajectory id `{}`", traj.id),
            });
        }
        trajectories.push(traj);
    }
    Ok(TrajectoryDataset {
        trajectories,
        provenance: provenance.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_round_trip() {
        let mut buf = Vec::new();
        write_jsonl(&TrajectoryDataset::empty("x"), &mut buf).unwrap();
        assert!(buf.is_empty());
        let ds = read_jsonl(&buf[..], "x").unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn integral_time_written_as_integer() {
        let t = Trajectory::new(
            "a",
            vec![
                TrajPoint::new(GeoPoint { lng: 116.3, lat: 39.9 }, 10.0),
                TrajPoint::new(GeoPoint { lng: 116.3000004, lat: 39.9 }, 10.5),
            ],
        )
        .unwrap();
        assert_eq!(
            to_line(&t),
            r#"{"id":"a","points":[[116.3,39.9,10],[116.3,39.9,10.5]],"meta":{}}"#
        );
    }

    #[test]
    fn missing_points_reports_line() {
        let input = "{\"id\":\"a\",\"points\":[[0,0,0],[0,0,1]]}\n{\"id\":\"b\"}\n";
        match read_jsonl(input.as_bytes(), "x") {
            Err(JsonlError::SchemaViolation { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("points"), "{message}");
            }
            other => panic!("expected schema violation, got {other:?}"),
        }
    }

    #[test]
    fn wrong_type_and_invariant_violations() {
        for bad in [
            r#"{"id":3,"points":[[0,0,0],[0,0,1]]}"#,
            r#"{"id":"a","points":[[0,0,"t"],[0,0,1]]}"#,
            r#"{"id":"a","points":[[0,0,1],[0,0,1]]}"#,
            r#"{"id":"a","points":[[0,99,0],[0,0,1]]}"#,
            r#"{"id":"a","points":[[0,0,0]]}"#,
        ] {
            assert!(
                matches!(read_jsonl(bad.as_bytes(), "x"), Err(JsonlError::SchemaViolation { line: 1, .. })),
                "{bad}"
            );
        }
        let dup = "{\"id\":\"a\",\"points\":[[0,0,0],[0,0,1]]}\n{\"id\":\"a\",\"points\":[[0,0,0],[0,0,1]]}";
        assert!(matches!(read_jsonl(dup.as_bytes(), "x"), Err(JsonlError::SchemaViolation { line: 2, .. })));
    }

    fn arb_traj(idx: usize) -> impl Strategy<Value = Trajectory> {
        (
            proptest::collection::vec((-180_000_000i64..=180_000_000, -90_000_000i64..=90_000_000, 1u32..5000, any::<bool>()), 2..40),
            proptest::collection::btree_map("[a-z]{1,6}", "[ -~]{0,12}", 0..3),
            0i64..2_000_000_000,
        )
            .prop_map(move |(raw, meta, t0)| {
                let mut t = t0 as f64;
                let points = raw
                    .into_iter()
                    .map(|(lng, lat, dt, half)| {
                        t += f64::from(dt) + if half { 0.5 } else { 0.0 };
                        TrajPoint::new(GeoPoint { lng: lng as f64 / 1e6, lat: lat as f64 / 1e6 }, t)
                    })
                    .collect();
                Trajectory { id: format!("traj-{idx}\"\\é"), points, meta }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn round_trip_is_identity(trajs in proptest::collection::vec(arb_traj(0), 100)) {
            let trajs: Vec<Trajectory> = trajs
                .into_iter()
                .enumerate()
                .map(|(i, mut t)| { t.id = format!("{}-{i}", t.id); t })
                .collect();
            let ds = TrajectoryDataset::new(trajs, "prop").unwrap();
            let mut buf = Vec::new();
            write_jsonl(&ds, &mut buf).unwrap();
            let back = read_jsonl(&buf[..], "prop").unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
