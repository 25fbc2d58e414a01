//! GPX 1.1 track ingestion.
//!
//! Each `<trkseg>` becomes its own [`Trajectory`]. Track points need `lat`,
//! `lon` and a `<time>` child; `<ele>` and any extension elements are ignored.
//! Points that cannot be used are dropped rather than failing the document:
//!
//! * missing or unparseable `<time>`,
//! * coordinates outside the WGS84 range,
//! * a timestamp not strictly after the previous kept point (this also
//!   collapses exact duplicates).
//!
//! Segments left with fewer than two points are discarded.

use std::collections::BTreeMap;

use chrono::{DateTime, NaiveDateTime};
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use thiserror::Error;

use crate::geo::GeoPoint;
use crate::trajectory::{TrajPoint, Trajectory};

#[derive(Debug, Error)]
pub enum GpxError {
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("no usable track points")]
    NoUsablePoints,
}

/// Result of parsing one GPX document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GpxParse {
    pub trajectories: Vec<Trajectory>,
    /// Every `<trkpt>` seen, usable or not.
    pub total_points: usize,
    pub dropped_points: usize,
}

#[derive(Default)]
struct PendingPoint {
    lat: Option<f64>,
    lon: Option<f64>,
    time: Option<f64>,
}

#[derive(Clone, Copy, PartialEq)]
enum TextTarget {
    None,
    TrackName,
    TrackType,
    PointTime,
}

/// Parses a GPX document. Trajectory ids are `{source_id}:{track}:{segment}`.
pub fn parse_gpx(bytes: &[u8], source_id: &str) -> Result<GpxParse, GpxError> {
    let mut reader = Reader::from_reader(bytes);
    reader.config_mut().trim_text(true);

    let mut out = GpxParse::default();
    let mut stack: Vec<Vec<u8>> = Vec::new();
    let mut saw_root = false;
    let mut creator: Option<String> = None;

    let mut track_idx = 0usize;
    let mut seg_idx = 0usize;
    let mut track_meta: BTreeMap<String, String> = BTreeMap::new();
    let mut segment: Vec<TrajPoint> = Vec::new();
    let mut segment_dropped = 0usize;
    let mut point: Option<PendingPoint> = None;
    let mut text_target = TextTarget::None;
    let mut text = String::new();

    let mut buf = Vec::new();
    loop {
        let event = reader
            .read_event_into(&mut buf)
            .map_err(|e| GpxError::MalformedXml(format!("at byte {}: {e}", reader.buffer_position())))?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_empty = matches!(event, Event::Empty(_));
                let name = e.local_name().as_ref().to_vec();
                if stack.is_empty() {
                    if saw_root {
                        return Err(GpxError::MalformedXml("multiple root elements".into()));
                    }
                    if name != b"gpx" {
                        return Err(GpxError::MalformedXml(format!(
                            "root element is <{}>, expected <gpx>",
                            String::from_utf8_lossy(&name)
                        )));
                    }
                    saw_root = true;
                    creator = attr(e, b"creator")?;
                }
                let parent = stack.last().map(Vec::as_slice);
                match (name.as_slice(), parent) {
                    (b"trk", _) => {
                        track_meta.clear();
                        seg_idx = 0;
                    }
                    (b"trkseg", _) => {
                        segment.clear();
                        segment_dropped = 0;
                    }
                    (b"trkpt", Some(b"trkseg")) => {
                        let lat = attr(e, b"lat")?.and_then(|v| v.trim().parse::<f64>().ok());
                        let lon = attr(e, b"lon")?.and_then(|v| v.trim().parse::<f64>().ok());
                        let p = PendingPoint { lat, lon, time: None };
                        if is_empty {
                            // No <time> child possible.
                            out.total_points += 1;
                            segment_dropped += 1;
                        } else {
                            point = Some(p);
                        }
                    }
                    (b"time", Some(b"trkpt")) if point.is_some() => text_target = TextTarget::PointTime,
                    (b"name", Some(b"trk")) => text_target = TextTarget::TrackName,
                    (b"type", Some(b"trk")) => text_target = TextTarget::TrackType,
                    _ => {}
                }
                text.clear();
                if !is_empty {
                    stack.push(name);
                } else {
                    text_target = TextTarget::None;
                }
            }
            Event::Text(e) => {
                if text_target != TextTarget::None {
                    let s = e.unescape().map_err(|err| GpxError::MalformedXml(err.to_string()))?;
                    text.push_str(&s);
                }
            }
            Event::CData(e) => {
                if text_target != TextTarget::None {
                    text.push_str(&String::from_utf8_lossy(&e.into_inner()));
                }
            }
            Event::End(e) => {
                let name = e.local_name().as_ref().to_vec();
                match stack.pop() {
                    Some(open) if open == name => {}
                    _ => {
                        return Err(GpxError::MalformedXml(format!(
                            "unexpected closing tag </{}>",
                            String::from_utf8_lossy(&name)
                        )))
                    }
                }
                match name.as_slice() {
                    b"time" if text_target == TextTarget::PointTime => {
                        if let Some(p) = point.as_mut() {
                            p.time = parse_time(text.trim());
                        }
                        text_target = TextTarget::None;
                    }
                    b"name" if text_target == TextTarget::TrackName => {
                        track_meta.insert("name".into(), text.trim().to_string());
                        text_target = TextTarget::None;
                    }
                    b"type" if text_target == TextTarget::TrackType => {
                        track_meta.insert("type".into(), text.trim().to_string());
                        text_target = TextTarget::None;
                    }
                    b"trkpt" => {
                        if let Some(p) = point.take() {
                            out.total_points += 1;
                            if !push_point(&mut segment, p) {
                                segment_dropped += 1;
                            }
                        }
                    }
                    b"trkseg" => {
                        let points = std::mem::take(&mut segment);
                        if points.len() >= 2 {
                            let mut meta = track_meta.clone();
                            if let Some(c) = &creator {
                                meta.insert("creator".into(), c.clone());
                            }
                            out.trajectories.push(Trajectory {
                                id: format!("{source_id}:{track_idx}:{seg_idx}"),
                                points,
                                meta,
                            });
                        } else {
                            segment_dropped += points.len();
                        }
                        out.dropped_points += segment_dropped;
                        segment_dropped = 0;
                        seg_idx += 1;
                    }
                    b"trk" => track_idx += 1,
                    _ => {}
                }
            }
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }

    if !saw_root {
        return Err(GpxError::MalformedXml("document has no root element".into()));
    }
    if !stack.is_empty() {
        return Err(GpxError::MalformedXml("unexpected end of document".into()));
    }
    if out.trajectories.is_empty() {
        return Err(GpxError::NoUsablePoints);
    }
    Ok(out)
}

/// Appends the point if usable; returns whether it was kept.
fn push_point(segment: &mut Vec<TrajPoint>, p: PendingPoint) -> bool {
    let (Some(lat), Some(lng), Some(t)) = (p.lat, p.lon, p.time) else {
        return false;
    };
    let Ok(pos) = GeoPoint::new(lng, lat) else {
        return false;
    };
    if segment.last().is_some_and(|prev| t <= prev.t) {
        return false;
    }
    segment.push(TrajPoint::new(pos, t));
    true
}

fn attr(e: &BytesStart<'_>, key: &[u8]) -> Result<Option<String>, GpxError> {
    for a in e.attributes() {
        let a = a.map_err(|err| GpxError::MalformedXml(err.to_string()))?;
        if a.key.local_name().as_ref() == key {
            let v = a
                .unescape_value()
                .map_err(|err| GpxError::MalformedXml(err.to_string()))?;
            return Ok(Some(v.into_owned()));
        }
    }
    Ok(None)
}

/// ISO-8601 / RFC 3339 timestamp to fractional Unix seconds. Timestamps
/// without an offset are read as UTC.
pub fn parse_time(s: &str) -> Option<f64> {
    let (secs, nanos) = if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        (dt.timestamp(), dt.timestamp_subsec_nanos())
    } else {
        let naive = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f").ok()?;
        let utc = naive.and_utc();
        (utc.timestamp(), utc.timestamp_subsec_nanos())
    };
    Some(secs as f64 + f64::from(nanos) / 1e9)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(body: &str) -> String {
        format!(
            r#"<?xml version="1.0" encoding="UTF-8"?>
<gpx version="1.1" creator="unit-test" xmlns="http://www.topografix.com/GPX/1/1">{body}</gpx>"#
        )
    }

    fn trkpt(lat: f64, lon: f64, time: &str) -> String {
        format!(r#"<trkpt lat="{lat}" lon="{lon}"><ele>12.0</ele><time>{time}</time></trkpt>"#)
    }

    #[test]
    fn three_points_one_trajectory() {
        let body = format!(
            "<trk><name>ride</name><trkseg>{}{}{}</trkseg></trk>",
            trkpt(39.9, 116.3, "2020-01-01T00:00:00Z"),
            trkpt(39.9001, 116.3, "2020-01-01T00:00:01Z"),
            trkpt(39.9002, 116.3, "2020-01-01T00:00:02Z"),
        );
        let parsed = parse_gpx(doc(&body).as_bytes(), "f").unwrap();
        assert_eq!(parsed.trajectories.len(), 1);
        let t = &parsed.trajectories[0];
        assert_eq!(t.len(), 3);
        assert_eq!(t.id, "f:0:0");
        assert_eq!(t.points[0].t, 1_577_836_800.0);
        assert_eq!(t.meta.get("name").map(String::as_str), Some("ride"));
        assert_eq!(t.meta.get("creator").map(String::as_str), Some("unit-test"));
        assert_eq!(parsed.dropped_points, 0);
    }

    #[test]
    fn out_of_range_latitude_dropped() {
        let body = format!(
            "<trk><trkseg>{}{}{}</trkseg></trk>",
            trkpt(39.9, 116.3, "2020-01-01T00:00:00Z"),
            trkpt(95.0, 116.3, "2020-01-01T00:00:01Z"),
            trkpt(39.9002, 116.3, "2020-01-01T00:00:02Z"),
        );
        let parsed = parse_gpx(doc(&body).as_bytes(), "f").unwrap();
        assert_eq!(parsed.trajectories[0].len(), 2);
        assert_eq!(parsed.dropped_points, 1);
    }

    #[test]
    fn duplicates_collapse_and_missing_time_dropped() {
        let body = format!(
            r#"<trk><trkseg>{}{}<trkpt lat="39.9" lon="116.3"></trkpt>{}</trkseg></trk>"#,
            trkpt(39.9, 116.3, "2020-01-01T00:00:00Z"),
            trkpt(39.9, 116.3, "2020-01-01T00:00:00Z"),
            trkpt(39.9002, 116.3, "2020-01-01T00:00:02Z"),
        );
        let parsed = parse_gpx(doc(&body).as_bytes(), "f").unwrap();
        assert_eq!(parsed.trajectories[0].len(), 2);
        assert_eq!(parsed.dropped_points, 2);
        assert_eq!(parsed.total_points, 4);
    }

    #[test]
    fn non_monotonic_points_dropped_not_sorted() {
        let body = format!(
            "<trk><trkseg>{}{}{}</trkseg></trk>",
            trkpt(39.9, 116.3, "2020-01-01T00:00:05Z"),
            trkpt(39.9001, 116.3, "2020-01-01T00:00:01Z"),
            trkpt(39.9002, 116.3, "2020-01-01T00:00:07Z"),
        );
        let parsed = parse_gpx(doc(&body).as_bytes(), "f").unwrap();
        let ts: Vec<f64> = parsed.trajectories[0].points.iter().map(|p| p.t).collect();
        assert_eq!(ts, vec![1_577_836_805.0, 1_577_836_807.0]);
    }

    #[test]
    fn segments_split_into_trajectories() {
        let seg = format!(
            "<trkseg>{}{}</trkseg>",
            trkpt(39.9, 116.3, "2020-01-01T00:00:00Z"),
            trkpt(39.9001, 116.3, "2020-01-01T00:00:01Z"),
        );
        let body = format!("<trk>{seg}{seg}</trk><trk>{seg}</trk>");
        let parsed = parse_gpx(doc(&body).as_bytes(), "f").unwrap();
        let ids: Vec<&str> = parsed.trajectories.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, ["f:0:0", "f:0:1", "f:1:0"]);
    }

    #[test]
    fn fractional_and_offset_times() {
        assert_eq!(parse_time("2020-01-01T00:00:00.250Z"), Some(1_577_836_800.25));
        assert_eq!(parse_time("2020-01-01T01:00:00+01:00"), Some(1_577_836_800.0));
        assert_eq!(parse_time("2020-01-01T00:00:00"), Some(1_577_836_800.0));
        assert_eq!(parse_time("yesterday"), None);
    }

    #[test]
    fn malformed_documents() {
        assert!(matches!(parse_gpx(b"<gpx><trk></gpx>", "f"), Err(GpxError::MalformedXml(_))));
        assert!(matches!(parse_gpx(b"<gpx><trk>", "f"), Err(GpxError::MalformedXml(_))));
        assert!(matches!(parse_gpx(b"", "f"), Err(GpxError::MalformedXml(_))));
        assert!(matches!(parse_gpx(b"<kml></kml>", "f"), Err(GpxError::MalformedXml(_))));
    }

    #[test]
    fn all_points_unusable() {
        let body = format!("<trk><trkseg>{}</trkseg></trk>", trkpt(95.0, 116.3, "2020-01-01T00:00:00Z"));
        assert!(matches!(parse_gpx(doc(&body).as_bytes(), "f"), Err(GpxError::NoUsablePoints)));
        assert!(matches!(parse_gpx(doc("").as_bytes(), "f"), Err(GpxError::NoUsablePoints)));
    }
}
