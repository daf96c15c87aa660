//! Spatio-temporal sensing score: a (segment, interval) cell is covered when
//! at least one equipped bike enters the segment during the interval, and
//! the score is the length-weighted share of covered cells in percent.

use std::collections::BTreeSet;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fleet_sim::{BikeId, BikeTrajectory};
use crate::stats::pearson;
use crate::trips::TripLog;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntervalGrid {
    pub t0: u32,
    pub t1: u32,
    pub interval_min: u32,
}

impl IntervalGrid {
    /// `delta_h` hours per interval; `60·delta_h` must be a whole number of
    /// minutes dividing `t1 - t0`.
    pub fn new(t0: u32, t1: u32, delta_h: f64) -> Result<Self> {
        let minutes = delta_h * 60.0;
        if !(minutes.is_finite() && minutes >= 1.0) || minutes.fract() != 0.0 {
            return Err(Error::Contract(format!(
                "interval of {delta_h} h is not a positive whole number of minutes"
            )));
        }
        let interval_min = minutes as u32;
        if t1 <= t0 || (t1 - t0) % interval_min != 0 {
            return Err(Error::Contract(format!(
                "interval of {interval_min} min does not divide horizon [{t0}, {t1}]"
            )));
        }
        Ok(IntervalGrid {
            t0,
            t1,
            interval_min,
        })
    }

    pub fn for_log(log: &TripLog, delta_h: f64) -> Result<Self> {
        Self::new(log.horizon.0, log.horizon.1, delta_h)
    }

    pub fn delta_h(&self) -> f64 {
        self.interval_min as f64 / 60.0
    }

    pub fn intervals(&self) -> usize {
        ((self.t1 - self.t0) / self.interval_min) as usize
    }

    /// Interval index of a minute; the closing minute `t1` belongs to the
    /// last interval.
    pub fn interval_of(&self, minute: u32) -> Option<usize> {
        if minute < self.t0 || minute > self.t1 {
            return None;
        }
        let idx = ((minute - self.t0) / self.interval_min) as usize;
        Some(idx.min(self.intervals() - 1))
    }
}

/// Dense `segments × intervals` count matrix, row-major by segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageCounts {
    pub segments: usize,
    pub intervals: usize,
    pub data: Vec<u32>,
}

impl CoverageCounts {
    pub fn zeros(segments: usize, intervals: usize) -> Self {
        CoverageCounts {
            segments,
            intervals,
            data: vec![0; segments * intervals],
        }
    }

    pub fn get(&self, segment: usize, interval: usize) -> u32 {
        self.data[segment * self.intervals + interval]
    }

    pub fn total(&self) -> u64 {
        self.data.iter().map(|&c| c as u64).sum()
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["segment_id", "interval", "count"])?;
        for e in 0..self.segments {
            for t in 0..self.intervals {
                let c = self.get(e, t);
                if c > 0 {
                    w.write_record([e.to_string(), t.to_string(), c.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn equipped_mask(equipped: &BTreeSet<BikeId>, fleet: usize) -> Vec<bool> {
    let mut mask = vec![false; fleet];
    for b in equipped {
        if b.0 < fleet {
            mask[b.0] = true;
        }
    }
    mask
}

/// `N[e][t]`: entries of equipped bikes into segment `e` during interval `t`.
pub fn coverage_counts(
    trajectories: &[BikeTrajectory],
    equipped: &BTreeSet<BikeId>,
    grid: &IntervalGrid,
    segment_count: usize,
) -> Result<CoverageCounts> {
    let mut counts = CoverageCounts::zeros(segment_count, grid.intervals());
    for traj in trajectories.iter().filter(|t| equipped.contains(&t.bike)) {
        for &(seg, minute) in &traj.events {
            let t = grid.interval_of(minute).ok_or_else(|| {
                Error::Contract(format!(
                    "bike {}: event at minute {minute} outside [{}, {}]",
                    traj.bike.0, grid.t0, grid.t1
                ))
            })?;
            if seg.0 >= segment_count {
                return Err(Error::Contract(format!("segment {} out of range", seg.0)));
            }
            counts.data[seg.0 * counts.intervals + t] += 1;
        }
    }
    Ok(counts)
}

/// `Φ = 100 · Σ_e Σ_t l_e·[N_et ≥ 1] / (N_T · Σ_e l_e)`.
pub fn sensing_score(counts: &CoverageCounts, lengths: &[f64], grid: &IntervalGrid) -> Result<f64> {
    if counts.segments != lengths.len() || counts.intervals != grid.intervals() {
        return Err(Error::Contract(format!(
            "count matrix {}x{} does not match {} segments x {} intervals",
            counts.segments,
            counts.intervals,
            lengths.len(),
            grid.intervals()
        )));
    }
    let total: f64 = lengths.iter().sum();
    if lengths.is_empty() || total <= 0.0 {
        return Err(Error::UndefinedScore("network has no segment length".into()));
    }
    let covered: f64 = lengths
        .iter()
        .enumerate()
        .map(|(e, &l)| {
            let cells = (0..counts.intervals).filter(|&t| counts.get(e, t) >= 1).count();
            l * cells as f64
        })
        .sum();
    Ok(100.0 * covered / (counts.intervals as f64 * total))
}

/// Drops events after the horizon end. Trips that start late in the horizon
/// can keep riding past it; sensing stops at the horizon.
pub fn clip_to_horizon(trajectories: &[BikeTrajectory], grid: &IntervalGrid) -> Vec<BikeTrajectory> {
    trajectories
        .iter()
        .map(|t| BikeTrajectory {
            events: t
                .events
                .iter()
                .copied()
                .filter(|&(_, m)| m >= grid.t0 && m <= grid.t1)
                .collect(),
            ..t.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensingReport {
    pub phi_pct: f64,
    pub grid: IntervalGrid,
    pub equipped_count: usize,
    #[serde(skip)]
    pub counts: CoverageCounts,
}

/// Clips, counts and scores in one step.
pub fn sensing_report(
    trajectories: &[BikeTrajectory],
    equipped: &BTreeSet<BikeId>,
    lengths: &[f64],
    grid: &IntervalGrid,
) -> Result<SensingReport> {
    let clipped = clip_to_horizon(trajectories, grid);
    let counts = coverage_counts(&clipped, equipped, grid, lengths.len())?;
    let phi_pct = sensing_score(&counts, lengths, grid)?;
    Ok(SensingReport {
        phi_pct,
        grid: *grid,
        equipped_count: equipped.len(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HourRow {
    pub hour: u32,
    pub trips_started: usize,
    pub coverage_events: u64,
    /// `(segment, count)` for segments entered by equipped bikes this hour.
    pub segment_counts: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HourlyDiagnostics {
    pub rows: Vec<HourRow>,
    /// Pearson correlation of trips started and coverage events per hour.
    pub correlation: Option<f64>,
}

/// Per-hour trip starts and equipped-bike segment entries over the log's
/// horizon, which must start and end on the hour.
pub fn hourly_diagnostics(
    trajectories: &[BikeTrajectory],
    equipped: &BTreeSet<BikeId>,
    log: &TripLog,
) -> Result<HourlyDiagnostics> {
    let grid = IntervalGrid::for_log(log, 1.0)?;
    if grid.t0 % 60 != 0 {
        return Err(Error::Contract("horizon must start on the hour".into()));
    }
    let hours = grid.intervals();
    let first_hour = grid.t0 / 60;
    let mut trips_started = vec![0usize; hours];
    for t in &log.trips {
        if let Some(h) = grid.interval_of(t.start_min) {
            trips_started[h] += 1;
        }
    }
    let fleet = trajectories.iter().map(|t| t.bike.0 + 1).max().unwrap_or(0);
    let mask = equipped_mask(equipped, fleet);
    let mut per_hour: Vec<std::collections::BTreeMap<usize, u32>> = vec![Default::default(); hours];
    for traj in trajectories.iter().filter(|t| mask[t.bike.0]) {
        for &(seg, minute) in &traj.events {
            if let Some(h) = grid.interval_of(minute) {
                *per_hour[h].entry(seg.0).or_insert(0) += 1;
            }
        }
    }
    let rows: Vec<HourRow> = per_hour
        .into_iter()
        .enumerate()
        .map(|(h, segs)| HourRow {
            hour: first_hour + h as u32,
            trips_started: trips_started[h],
            coverage_events: segs.values().map(|&c| c as u64).sum(),
            segment_counts: segs.into_iter().collect(),
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.trips_started as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.coverage_events as f64).collect();
    Ok(HourlyDiagnostics {
        correlation: pearson(&xs, &ys),
        rows,
    })
}

impl HourlyDiagnostics {
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["hour", "trips_started", "coverage_events"])?;
        for r in &self.rows {
            w.write_record([
                r.hour.to_string(),
                r.trips_started.to_string(),
                r.coverage_events.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_segment_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["hour", "segment_id", "count"])?;
        for r in &self.rows {
            for &(e, c) in &r.segment_counts {
                w.write_record([r.hour.to_string(), e.to_string(), c.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
