//! Trip ingestion and cleaning: stand snapping, routing, distance and
//! time-window filters, and per-segment entry times.

use std::collections::{BTreeSet, HashMap};
use std::io::Read;

use chrono::{NaiveDateTime, Timelike};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NodeId, Path, PathCache, RoadNetwork, SegmentId};

pub const TRIPLOG_FORMAT: &str = "velosense-triplog-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StandId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stand {
    pub id: StandId,
    pub node: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTrip {
    pub id: String,
    pub start_time: NaiveDateTime,
    pub start_lat: f64,
    pub start_lon: f64,
    pub end_lat: f64,
    pub end_lon: f64,
}

impl RawTrip {
    pub fn start_minute(&self) -> u32 {
        self.start_time.hour() * 60 + self.start_time.minute()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    pub rows: usize,
    pub missing_coords: usize,
    pub bad_timestamp: usize,
}

impl ParseReport {
    pub fn dropped(&self) -> usize {
        self.missing_coords + self.bad_timestamp
    }
}

const TIME_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M",
    "%m/%d/%Y %H:%M:%S%.f",
    "%m/%d/%Y %H:%M",
];

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim().trim_end_matches('Z');
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Parses a Citi Bike style trip file. Required columns are `started_at`,
/// `start_lat`, `start_lng` (or `start_lon`), `end_lat`, `end_lng` (or
/// `end_lon`); `ride_id` is used as the trip id when present.
pub fn parse_raw_trips<R: Read>(src: R) -> Result<(Vec<RawTrip>, ParseReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(src);
    let headers = rdr.headers()?.clone();
    let find = |names: &[&str]| {
        names
            .iter()
            .find_map(|n| headers.iter().position(|h| h.eq_ignore_ascii_case(n)))
    };
    let mut missing = Vec::new();
    let mut need = |label: &'static str, names: &[&str]| {
        let idx = find(names);
        if idx.is_none() {
            missing.push(label);
        }
        idx.unwrap_or(0)
    };
    let started = need("started_at", &["started_at"]);
    let slat = need("start_lat", &["start_lat"]);
    let slon = need("start_lng", &["start_lng", "start_lon"]);
    let elat = need("end_lat", &["end_lat"]);
    let elon = need("end_lng", &["end_lng", "end_lon"]);
    if !missing.is_empty() {
        return Err(Error::malformed(format!(
            "trip file missing required columns: {}",
            missing.join(", ")
        )));
    }
    let id_col = find(&["ride_id", "trip_id", "id"]);

    let mut trips = Vec::new();
    let mut report = ParseReport::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::malformed(format!("trip record {}: {e}", i + 1)))?;
        report.rows += 1;
        let coord = |idx: usize| {
            rec.get(idx)
                .filter(|s| !s.is_empty())
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
        };
        let (Some(a), Some(b), Some(c), Some(d)) = (coord(slat), coord(slon), coord(elat), coord(elon))
        else {
            report.missing_coords += 1;
            continue;
        };
        let Some(start_time) = rec.get(started).and_then(parse_timestamp) else {
            report.bad_timestamp += 1;
            continue;
        };
        let id = id_col
            .and_then(|c| rec.get(c))
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .unwrap_or_else(|| format!("row{}", i + 1));
        trips.push(RawTrip {
            id,
            start_time,
            start_lat: a,
            start_lon: b,
            end_lat: c,
            end_lon: d,
        });
    }
    Ok((trips, report))
}

/// Writes raw trips in the format `parse_raw_trips` reads.
pub fn write_raw_trips<W: std::io::Write>(trips: &[RawTrip], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["ride_id", "started_at", "start_lat", "start_lng", "end_lat", "end_lng"])?;
    for t in trips {
        w.write_record([
            t.id.clone(),
            t.start_time.format("%Y-%m-%d %H:%M:%S").to_string(),
            t.start_lat.to_string(),
            t.start_lon.to_string(),
            t.end_lat.to_string(),
            t.end_lon.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanParams {
    pub speed_kmh: f64,
    pub min_km: f64,
    pub max_km: f64,
    /// Inclusive start-minute window.
    pub window: (u32, u32),
}

impl Default for CleanParams {
    fn default() -> Self {
        CleanParams {
            speed_kmh: 13.0,
            min_km: 0.5,
            max_km: 5.0,
            window: (360, 1320),
        }
    }
}

impl CleanParams {
    pub fn speed_m_per_min(&self) -> f64 {
        self.speed_kmh * 1000.0 / 60.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CleanReport {
    pub input: usize,
    pub kept: usize,
    pub outside_window: usize,
    pub unreachable: usize,
    pub too_short: usize,
    pub too_long: usize,
    pub stands: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub id: String,
    pub origin: StandId,
    pub dest: StandId,
    pub start_min: u32,
    pub duration_min: u32,
    pub end_min: u32,
    pub distance_m: f64,
    pub segments: Vec<SegmentId>,
    /// Entry minute for each segment of the path, same order as `segments`.
    pub enter_min: Vec<u32>,
}

impl Trip {
    pub fn path(&self) -> Path {
        Path {
            segments: self.segments.clone(),
            distance_m: self.distance_m,
        }
    }

    pub fn events(&self) -> impl Iterator<Item = (SegmentId, u32)> + '_ {
        self.segments.iter().copied().zip(self.enter_min.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripLog {
    pub stands: Vec<Stand>,
    /// Sorted by `start_min`; ties keep ingestion order.
    pub trips: Vec<Trip>,
    /// `(t0, T)` in minutes from midnight.
    pub horizon: (u32, u32),
    pub speed_kmh: f64,
}

#[derive(Serialize, Deserialize)]
struct TripLogDoc {
    format: String,
    #[serde(flatten)]
    log: TripLog,
}

impl TripLog {
    pub fn stand_count(&self) -> usize {
        self.stands.len()
    }

    pub fn stand_node(&self, s: StandId) -> NodeId {
        self.stands[s.0].node
    }

    pub fn total_traversals(&self) -> usize {
        self.trips.iter().map(|t| t.segments.len()).sum()
    }

    pub fn write_json<W: std::io::Write>(&self, sink: W) -> Result<()> {
        let doc = TripLogDoc {
            format: TRIPLOG_FORMAT.to_string(),
            log: self.clone(),
        };
        serde_json::to_writer(sink, &doc)?;
        Ok(())
    }

    pub fn read_json<R: Read>(src: R) -> Result<Self> {
        let doc: TripLogDoc = serde_json::from_reader(src)?;
        if doc.format != TRIPLOG_FORMAT {
            return Err(Error::malformed(format!(
                "expected format {TRIPLOG_FORMAT}, found {}",
                doc.format
            )));
        }
        doc.log.validate()?;
        Ok(doc.log)
    }

    /// Checks ordering, horizon and stand references.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stands.iter().enumerate() {
            if s.id.0 != i {
                return Err(Error::malformed(format!("stand {i} has id {}", s.id.0)));
            }
        }
        let (t0, t1) = self.horizon;
        let mut prev = t0;
        for t in &self.trips {
            if t.origin.0 >= self.stands.len() || t.dest.0 >= self.stands.len() {
                return Err(Error::malformed(format!("trip {}: unknown stand", t.id)));
            }
            if t.start_min < prev || t.start_min > t1 {
                return Err(Error::malformed(format!(
                    "trip {}: start {} unsorted or outside horizon",
                    t.id, t.start_min
                )));
            }
            if t.end_min != t.start_min + t.duration_min || t.duration_min < 1 {
                return Err(Error::malformed(format!("trip {}: inconsistent timing", t.id)));
            }
            if t.segments.len() != t.enter_min.len() {
                return Err(Error::malformed(format!("trip {}: event length mismatch", t.id)));
            }
            prev = t.start_min;
        }
        Ok(())
    }
}

fn coord_key(lat: f64, lon: f64) -> (u64, u64) {
    (lat.to_bits(), lon.to_bits())
}

/// Entry minute of every segment along `path` for a trip leaving at
/// `start_min`.
pub fn traversal_times(
    net: &RoadNetwork,
    segments: &[SegmentId],
    start_min: u32,
    speed_m_per_min: f64,
) -> Vec<(SegmentId, u32)> {
    let mut cum = 0.0;
    segments
        .iter()
        .map(|&sid| {
            let enter = start_min + (cum / speed_m_per_min).floor() as u32;
            cum += net.segment(sid).length_m;
            (sid, enter)
        })
        .collect()
}

pub fn trip_duration_min(distance_m: f64, speed_m_per_min: f64) -> u32 {
    ((distance_m / speed_m_per_min).ceil() as u32).max(1)
}

/// Snaps, routes and filters raw trips into a `TripLog`.
///
/// Stands are the distinct snapped nodes over all raw endpoints, numbered by
/// ascending node id. Filters apply in order: time window, reachability,
/// distance bounds (all inclusive).
pub fn clean_trips(
    raw: &[RawTrip],
    net: &RoadNetwork,
    params: &CleanParams,
) -> Result<(TripLog, CleanReport)> {
    if net.node_count() == 0 {
        return Err(Error::malformed("cannot clean trips against an empty network"));
    }
    let mut coords: Vec<(f64, f64)> = raw
        .iter()
        .flat_map(|t| [(t.start_lat, t.start_lon), (t.end_lat, t.end_lon)])
        .collect();
    coords.sort_by_key(|&(a, b)| coord_key(a, b));
    coords.dedup_by_key(|&mut (a, b)| coord_key(a, b));
    let snapped: HashMap<(u64, u64), NodeId> = coords
        .par_iter()
        .map(|&(lat, lon)| Ok((coord_key(lat, lon), net.nearest_node(lat, lon)?)))
        .collect::<Result<_>>()?;

    let stand_nodes: BTreeSet<NodeId> = snapped.values().copied().collect();
    let stands: Vec<Stand> = stand_nodes
        .iter()
        .enumerate()
        .map(|(i, &node)| Stand {
            id: StandId(i),
            node,
        })
        .collect();
    let stand_of: HashMap<NodeId, StandId> = stands.iter().map(|s| (s.node, s.id)).collect();
    let stand_at = |lat: f64, lon: f64| stand_of[&snapped[&coord_key(lat, lon)]];

    let mut report = CleanReport {
        input: raw.len(),
        stands: stands.len(),
        ..Default::default()
    };
    let (w0, w1) = params.window;
    let in_window: Vec<(usize, StandId, StandId)> = raw
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            let m = t.start_minute();
            if m < w0 || m > w1 {
                report.outside_window += 1;
                return None;
            }
            Some((i, stand_at(t.start_lat, t.start_lon), stand_at(t.end_lat, t.end_lon)))
        })
        .collect();

    let dests: Vec<NodeId> = in_window.iter().map(|&(_, _, d)| stands[d.0].node).collect();
    let cache = PathCache::build(net, &dests);
    let speed = params.speed_m_per_min();
    let (lo, hi) = (params.min_km * 1000.0, params.max_km * 1000.0);

    let routed: Vec<Result<Trip>> = in_window
        .par_iter()
        .map(|&(i, o, d)| {
            let r = &raw[i];
            let path = cache.path(net, stands[o.0].node, stands[d.0].node)?;
            let start_min = r.start_minute();
            let duration_min = trip_duration_min(path.distance_m, speed);
            let events = traversal_times(net, &path.segments, start_min, speed);
            Ok(Trip {
                id: r.id.clone(),
                origin: o,
                dest: d,
                start_min,
                duration_min,
                end_min: start_min + duration_min,
                distance_m: path.distance_m,
                enter_min: events.iter().map(|e| e.1).collect(),
                segments: path.segments,
            })
        })
        .collect();

    let mut trips = Vec::with_capacity(routed.len());
    for r in routed {
        match r {
            Ok(t) if t.distance_m < lo => report.too_short += 1,
            Ok(t) if t.distance_m > hi => report.too_long += 1,
            Ok(t) => trips.push(t),
            Err(Error::NoPath { .. }) => report.unreachable += 1,
            Err(e) => return Err(e),
        }
    }
    trips.sort_by_key(|t| t.start_min);
    report.kept = trips.len();
    Ok((
        TripLog {
            stands,
            trips,
            horizon: params.window,
            speed_kmh: params.speed_kmh,
        },
        report,
    ))
}
