//! Monte Carlo estimation of per-stand visit expectations `p[s][e]`.
//!
//! Traversals are attributed to the bike's home stand. `p` is an expected
//! count per bike over the horizon, so it can exceed 1.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fleet_sim::{simulate, FleetPlan, SimConfig};
use crate::network::{NodeId, RoadNetwork, SegmentId};
use crate::stats::{fit_through_origin, OriginFit};
use crate::trips::{StandId, TripLog};

pub const DEFAULT_RUNS: usize = 20;

pub type PairMap = BTreeMap<(StandId, SegmentId), f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageSample {
    pub n_bar: PairMap,
    pub runs: usize,
    pub seed: u64,
    pub horizon: (u32, u32),
    pub stand_nodes: Vec<NodeId>,
}

impl CoverageSample {
    pub fn total(&self) -> f64 {
        self.n_bar.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMatrix {
    pub p: PairMap,
    pub runs: usize,
    pub seed: u64,
    pub horizon: (u32, u32),
    pub stand_nodes: Vec<NodeId>,
}

fn run_seed(seed: u64, tau: usize) -> u64 {
    seed.wrapping_add(tau as u64)
}

/// Mean traversal count per (home stand, segment) over `runs` passive
/// replays seeded `seed + 1 ..= seed + runs`.
pub fn mean_coverage(
    log: &TripLog,
    plan: &FleetPlan,
    runs: usize,
    seed: u64,
) -> Result<CoverageSample> {
    if runs == 0 {
        return Err(Error::Contract("runs must be at least 1".into()));
    }
    let per_run: Vec<HashMap<(StandId, SegmentId), u64>> = (1..=runs)
        .into_par_iter()
        .map(|tau| {
            let traj = simulate(log, plan, &SimConfig::passive(run_seed(seed, tau)))?;
            let mut counts = HashMap::new();
            for t in &traj {
                for &(seg, _) in &t.events {
                    *counts.entry((t.home, seg)).or_insert(0u64) += 1;
                }
            }
            Ok(counts)
        })
        .collect::<Result<_>>()?;

    // integer totals are exact, so the reduction order cannot change the mean
    let mut totals: BTreeMap<(StandId, SegmentId), u64> = BTreeMap::new();
    for counts in per_run {
        for (k, c) in counts {
            *totals.entry(k).or_insert(0) += c;
        }
    }
    let n_bar = totals
        .into_iter()
        .map(|(k, c)| (k, c as f64 / runs as f64))
        .collect();
    Ok(CoverageSample {
        n_bar,
        runs,
        seed,
        horizon: log.horizon,
        stand_nodes: log.stands.iter().map(|s| s.node).collect(),
    })
}

/// `p[s][e] = N̄[s][e] / b_s`.
pub fn estimate_probabilities(sample: &CoverageSample, plan: &FleetPlan) -> Result<CoverageMatrix> {
    let mut p = PairMap::new();
    for (&(s, e), &n) in &sample.n_bar {
        let b = plan.counts.get(s.0).copied().unwrap_or(0);
        if b == 0 {
            if n > 0.0 {
                return Err(Error::Contract(format!(
                    "stand {} has coverage but no bikes",
                    s.0
                )));
            }
            continue;
        }
        if n > 0.0 {
            p.insert((s, e), n / b as f64);
        }
    }
    Ok(CoverageMatrix {
        p,
        runs: sample.runs,
        seed: sample.seed,
        horizon: sample.horizon,
        stand_nodes: sample.stand_nodes.clone(),
    })
}

impl CoverageMatrix {
    pub fn stand_count(&self) -> usize {
        self.stand_nodes.len()
    }

    pub fn get(&self, s: StandId, e: SegmentId) -> f64 {
        self.p.get(&(s, e)).copied().unwrap_or(0.0)
    }

    pub fn row(&self, s: StandId) -> impl Iterator<Item = (SegmentId, f64)> + '_ {
        self.p
            .range((s, SegmentId(0))..=(s, SegmentId(usize::MAX)))
            .map(|(&(_, e), &p)| (e, p))
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["stand_id", "segment_id", "p"])?;
        for (&(s, e), &p) in &self.p {
            w.write_record([s.0.to_string(), e.0.to_string(), p.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_meta<W: Write>(&self, sink: W) -> Result<()> {
        let meta = MatrixMeta {
            runs: self.runs,
            seed: self.seed,
            horizon: self.horizon,
            stand_nodes: self.stand_nodes.clone(),
        };
        serde_json::to_writer_pretty(sink, &meta)?;
        Ok(())
    }

    pub fn read<C: Read, M: Read>(csv_src: C, meta_src: M) -> Result<Self> {
        let meta: MatrixMeta = serde_json::from_reader(meta_src)?;
        let mut rdr = csv::Reader::from_reader(csv_src);
        let mut p = PairMap::new();
        for (i, row) in rdr.deserialize::<(usize, usize, f64)>().enumerate() {
            let (s, e, v) =
                row.map_err(|err| Error::malformed(format!("coverage record {}: {err}", i + 1)))?;
            if !(v.is_finite() && v >= 0.0) || s >= meta.stand_nodes.len() {
                return Err(Error::malformed(format!("coverage record {}: invalid", i + 1)));
            }
            p.insert((StandId(s), SegmentId(e)), v);
        }
        Ok(CoverageMatrix {
            p,
            runs: meta.runs,
            seed: meta.seed,
            horizon: meta.horizon,
            stand_nodes: meta.stand_nodes,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixMeta {
    runs: usize,
    seed: u64,
    horizon: (u32, u32),
    stand_nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayRow {
    pub segment: SegmentId,
    pub distance_m: f64,
    pub p: f64,
}

/// Covered segments of one stand ordered by network distance from the
/// stand to the nearer segment endpoint.
pub fn probability_decay_report(
    matrix: &CoverageMatrix,
    net: &RoadNetwork,
    stand: StandId,
) -> Result<Vec<DecayRow>> {
    let node = *matrix
        .stand_nodes
        .get(stand.0)
        .ok_or_else(|| Error::Contract(format!("unknown stand {}", stand.0)))?;
    let rows: Vec<(SegmentId, f64)> = matrix.row(stand).filter(|&(_, p)| p > 0.0).collect();
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let tree = net.shortest_path_tree(node);
    let mut out: Vec<DecayRow> = rows
        .into_iter()
        .map(|(segment, p)| {
            let s = net.segment(segment);
            DecayRow {
                segment,
                distance_m: tree.distance(s.u).min(tree.distance(s.v)),
                p,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.distance_m
            .total_cmp(&b.distance_m)
            .then(a.segment.cmp(&b.segment))
    });
    Ok(out)
}

/// One (stand, segment) pair of the linearity check: mean coverage by the
/// first `n` tracked bikes of the stand, for several `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearityFit {
    pub stand: StandId,
    pub segment: SegmentId,
    pub levels: Vec<u32>,
    pub n_bar: Vec<f64>,
    pub fit: OriginFit,
}

/// Varies `n_s` by tracking only the first `n` bikes of each stand (up to
/// `level_count` evenly spaced values in `1..=b_s`) and fits `N̄ = p n`
/// through the origin. Pairs whose full-stand mean is below `min_mean` are
/// skipped, as are stands with fewer than three distinct levels.
pub fn linearity_study(
    log: &TripLog,
    plan: &FleetPlan,
    runs: usize,
    seed: u64,
    level_count: usize,
    min_mean: f64,
) -> Result<Vec<LinearityFit>> {
    if runs == 0 {
        return Err(Error::Contract("runs must be at least 1".into()));
    }
    let levels: Vec<Vec<u32>> = plan
        .counts
        .iter()
        .map(|&b| {
            let mut lv: Vec<u32> = (1..=level_count)
                .map(|k| ((b as f64 * k as f64 / level_count as f64).round() as u32).max(1))
                .filter(|&n| n <= b)
                .collect();
            lv.dedup();
            lv
        })
        .collect();

    let per_run: Vec<HashMap<(StandId, SegmentId), Vec<u64>>> = (1..=runs)
        .into_par_iter()
        .map(|tau| {
            let traj = simulate(log, plan, &SimConfig::passive(run_seed(seed, tau)))?;
            let mut out: HashMap<(StandId, SegmentId), Vec<u64>> = HashMap::new();
            for (s, bikes) in plan.bikes.iter().enumerate() {
                let lv = &levels[s];
                if lv.len() < 3 {
                    continue;
                }
                // level index k counts bikes ranked < lv[k]
                for (rank, b) in bikes.iter().enumerate() {
                    let first = lv.partition_point(|&n| (n as usize) <= rank);
                    if first == lv.len() {
                        break;
                    }
                    for &(seg, _) in &traj[b.0].events {
                        let slot = out
                            .entry((StandId(s), seg))
                            .or_insert_with(|| vec![0; lv.len()]);
                        for c in &mut slot[first..] {
                            *c += 1;
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut totals: BTreeMap<(StandId, SegmentId), Vec<u64>> = BTreeMap::new();
    for run in per_run {
        for (k, v) in run {
            let slot = totals.entry(k).or_insert_with(|| vec![0; v.len()]);
            for (a, b) in slot.iter_mut().zip(v) {
                *a += b;
            }
        }
    }
    let fits = totals
        .into_iter()
        .filter_map(|((s, e), sums)| {
            let lv = &levels[s.0];
            let n_bar: Vec<f64> = sums.iter().map(|&c| c as f64 / runs as f64).collect();
            let full = *n_bar.last()?;
            let at_full_stand = *lv.last()? == plan.counts[s.0];
            if !at_full_stand || full < min_mean {
                return None;
            }
            let xs: Vec<f64> = lv.iter().map(|&n| n as f64).collect();
            let fit = fit_through_origin(&xs, &n_bar);
            Some(LinearityFit {
                stand: s,
                segment: e,
                levels: lv.clone(),
                n_bar,
                fit,
            })
        })
        .collect();
    Ok(fits)
}
