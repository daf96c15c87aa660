//! Sensor-to-stand allocation: maximize the total length of segments whose
//! expected coverage `N_e = Σ_s p[s][e] n_s` reaches the threshold `K`,
//! subject to a sensor budget and per-stand fleet caps.

mod exact;
mod greedy;
pub mod lp;

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coverage_model::CoverageMatrix;
use crate::error::{Error, Result};
use crate::fleet_sim::{rng_from_seed, FleetPlan};
use crate::network::{RoadNetwork, SegmentId};
use crate::trips::StandId;

pub use exact::solve_exact;
pub use greedy::{local_search, solve_greedy};
pub use lp::export_lp;

pub const ALLOCATION_FORMAT: &str = "velosense-alloc-v1";
pub const DEFAULT_K: f64 = 1.0;
/// Slack on the threshold test `N_e >= K`.
pub const THRESHOLD_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct MilpInstance {
    /// Fleet size per stand, the upper bound on `n_s`.
    pub caps: Vec<u32>,
    /// Length of every network segment, candidate or not.
    pub lengths: Vec<f64>,
    /// Segments with at least one positive coefficient.
    pub candidates: Vec<SegmentId>,
    /// Per candidate: `(stand, p)` with `p > 0`, by stand.
    pub columns: Vec<Vec<(StandId, f64)>>,
    /// Per stand: `(candidate index, p)` with `p > 0`.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub budget: u32,
    pub k: f64,
    pub big_m: f64,
    pub warnings: Vec<String>,
}

impl MilpInstance {
    /// Assembles an instance from sparse `(stand, segment, p)` entries.
    /// Budgets above the total fleet are clamped with a warning.
    pub fn from_entries(
        entries: impl IntoIterator<Item = (StandId, SegmentId, f64)>,
        lengths: Vec<f64>,
        caps: Vec<u32>,
        budget: u32,
        k: f64,
    ) -> Result<Self> {
        if budget == 0 {
            return Err(Error::Contract("sensor budget must be at least 1".into()));
        }
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::Contract(format!("threshold K must be positive, got {k}")));
        }
        let mut by_segment: Vec<Vec<(StandId, f64)>> = vec![Vec::new(); lengths.len()];
        for (s, e, p) in entries {
            if s.0 >= caps.len() || e.0 >= lengths.len() {
                return Err(Error::Contract(format!(
                    "coefficient for stand {} segment {} out of range",
                    s.0, e.0
                )));
            }
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::Contract(format!("invalid coefficient {p}")));
            }
            if p > 0.0 {
                by_segment[e.0].push((s, p));
            }
        }
        let mut candidates = Vec::new();
        let mut columns = Vec::new();
        let mut rows = vec![Vec::new(); caps.len()];
        let mut max_reach: f64 = 0.0;
        for (e, mut col) in by_segment.into_iter().enumerate() {
            if col.is_empty() {
                continue;
            }
            col.sort_by_key(|&(s, _)| s);
            let idx = candidates.len();
            let reach: f64 = col.iter().map(|&(s, p)| p * caps[s.0] as f64).sum();
            max_reach = max_reach.max(reach);
            for &(s, p) in &col {
                rows[s.0].push((idx, p));
            }
            candidates.push(SegmentId(e));
            columns.push(col);
        }

        let mut warnings = Vec::new();
        let capacity: u64 = caps.iter().map(|&c| c as u64).sum();
        let budget = if budget as u64 > capacity {
            warnings.push(format!(
                "budget {budget} exceeds total fleet {capacity}; clamped"
            ));
            log::warn!("budget {budget} exceeds total fleet {capacity}; clamped");
            capacity as u32
        } else {
            budget
        };
        Ok(MilpInstance {
            caps,
            lengths,
            candidates,
            columns,
            rows,
            budget,
            k,
            big_m: k + max_reach,
            warnings,
        })
    }

    pub fn stand_count(&self) -> usize {
        self.caps.len()
    }

    pub fn segment_count(&self) -> usize {
        self.lengths.len()
    }

    /// Same instance with every segment length multiplied by `c`.
    pub fn scaled_lengths(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.lengths.iter_mut().for_each(|l| *l *= c);
        out
    }

    pub fn with_budget(&self, budget: u32) -> Result<Self> {
        let entries: Vec<_> = self
            .candidates
            .iter()
            .zip(&self.columns)
            .flat_map(|(&e, col)| col.iter().map(move |&(s, p)| (s, e, p)))
            .collect();
        Self::from_entries(entries, self.lengths.clone(), self.caps.clone(), budget, self.k)
    }

    /// Expected coverage per candidate for an allocation.
    pub(crate) fn candidate_coverage(&self, n: &[u32]) -> Vec<f64> {
        let mut cov = vec![0.0; self.candidates.len()];
        for (s, row) in self.rows.iter().enumerate() {
            if n[s] == 0 {
                continue;
            }
            for &(c, p) in row {
                cov[c] += p * n[s] as f64;
            }
        }
        cov
    }

    pub(crate) fn satisfied(&self, coverage: f64) -> bool {
        coverage >= self.k - THRESHOLD_EPS
    }

    /// Objective of an allocation, summed over candidates in segment order.
    pub(crate) fn objective_of(&self, n: &[u32]) -> f64 {
        let cov = self.candidate_coverage(n);
        self.candidates
            .iter()
            .zip(&cov)
            .filter(|&(_, &c)| self.satisfied(c))
            .map(|(&e, _)| self.lengths[e.0])
            .sum()
    }

    pub fn check_feasible(&self, n: &[u32]) -> Result<()> {
        if n.len() != self.caps.len() {
            return Err(Error::Contract("allocation length mismatch".into()));
        }
        if let Some(s) = (0..n.len()).find(|&s| n[s] > self.caps[s]) {
            return Err(Error::Contract(format!(
                "stand {s}: {} sensors exceed {} bikes",
                n[s], self.caps[s]
            )));
        }
        let total: u64 = n.iter().map(|&x| x as u64).sum();
        if total > self.budget as u64 {
            return Err(Error::Contract(format!(
                "{total} sensors exceed budget {}",
                self.budget
            )));
        }
        Ok(())
    }
}

/// Builds the allocation model from estimated visit expectations.
pub fn build_instance(
    matrix: &CoverageMatrix,
    net: &RoadNetwork,
    plan: &FleetPlan,
    budget: u32,
    k: f64,
) -> Result<MilpInstance> {
    if matrix.stand_count() != plan.counts.len() {
        return Err(Error::Contract(format!(
            "coverage matrix has {} stands, fleet plan {}",
            matrix.stand_count(),
            plan.counts.len()
        )));
    }
    MilpInstance::from_entries(
        matrix.p.iter().map(|(&(s, e), &p)| (s, e, p)),
        net.lengths(),
        plan.counts.clone(),
        budget,
        k,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverTag {
    Exact,
    Greedy,
    Random,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPlan {
    pub n: Vec<u32>,
    pub objective_m: f64,
    /// Expected coverage for every network segment.
    pub coverage: Vec<f64>,
    pub y: Vec<bool>,
    pub solver: SolverTag,
    /// Relative optimality gap when known; `Some(0.0)` means proven optimal.
    pub gap: Option<f64>,
}

impl AllocationPlan {
    /// Derives `N_e`, `y_e` and the objective for a feasible `n`.
    pub fn evaluate(
        inst: &MilpInstance,
        n: Vec<u32>,
        solver: SolverTag,
        gap: Option<f64>,
    ) -> Result<Self> {
        inst.check_feasible(&n)?;
        let cand = inst.candidate_coverage(&n);
        let mut coverage = vec![0.0; inst.segment_count()];
        for (&e, &c) in inst.candidates.iter().zip(&cand) {
            coverage[e.0] = c;
        }
        let y: Vec<bool> = coverage.iter().map(|&c| inst.satisfied(c)).collect();
        let objective_m = inst.objective_of(&n);
        Ok(AllocationPlan {
            n,
            objective_m,
            coverage,
            y,
            solver,
            gap,
        })
    }

    pub fn sensors(&self) -> u64 {
        self.n.iter().map(|&x| x as u64).sum()
    }

    pub fn write_json<W: Write>(&self, inst: &MilpInstance, sink: W) -> Result<()> {
        let doc = AllocDoc {
            format: ALLOCATION_FORMAT.into(),
            solver: self.solver,
            objective_m: self.objective_m,
            gap: self.gap,
            budget: inst.budget,
            k: inst.k,
            sensors: self.sensors(),
            satisfied_segments: self.y.iter().filter(|&&y| y).count(),
            n: self.n.clone(),
        };
        serde_json::to_writer_pretty(sink, &doc)?;
        Ok(())
    }

    /// Reads back the per-stand counts of a stored plan.
    pub fn read_counts<R: Read>(src: R) -> Result<(SolverTag, Vec<u32>)> {
        let doc: AllocDoc = serde_json::from_reader(src)?;
        if doc.format != ALLOCATION_FORMAT {
            return Err(Error::malformed(format!("expected format {ALLOCATION_FORMAT}")));
        }
        Ok((doc.solver, doc.n))
    }
}

#[derive(Serialize, Deserialize)]
struct AllocDoc {
    format: String,
    solver: SolverTag,
    objective_m: f64,
    gap: Option<f64>,
    budget: u32,
    k: f64,
    sensors: u64,
    satisfied_segments: usize,
    n: Vec<u32>,
}

/// Places the budget one sensor at a time on a uniformly drawn stand with
/// spare capacity.
pub fn random_allocation(inst: &MilpInstance, seed: u64) -> Result<AllocationPlan> {
    let mut rng = rng_from_seed(seed);
    let mut n = vec![0u32; inst.stand_count()];
    let mut open: Vec<usize> = (0..n.len()).filter(|&s| inst.caps[s] > 0).collect();
    for _ in 0..inst.budget {
        if open.is_empty() {
            break;
        }
        let i = rng.gen_range(0..open.len());
        let s = open[i];
        n[s] += 1;
        if n[s] == inst.caps[s] {
            open.remove(i);
        }
    }
    AllocationPlan::evaluate(inst, n, SolverTag::Random, None)
}
