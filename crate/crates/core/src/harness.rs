//! End-to-end experiments: data → fleet → visit expectations → allocation
//! → guided or passive replay → sensing score, swept over budgets, sensing
//! intervals and guidance acceptance rates.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{
    build_instance, random_allocation, solve_exact, solve_greedy, AllocationPlan, MilpInstance,
    DEFAULT_K,
};
use crate::coverage_model::{estimate_probabilities, mean_coverage, CoverageMatrix, DEFAULT_RUNS};
use crate::error::{Error, Result, StageExt};
use crate::fleet_sim::{
    initial_bike_counts, simulate, write_trajectories, BikeTrajectory, FleetPlan, SimConfig,
};
use crate::metrics::{sensing_report, IntervalGrid};
use crate::network::RoadNetwork;
use crate::stats::{mean, std_dev};
use crate::synth::{generate, SynthConfig};
use crate::trips::{clean_trips, parse_raw_trips, CleanParams, CleanReport, TripLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "random-noactive")]
    RandomNoActive,
    #[serde(rename = "optimized-noactive")]
    OptimizedNoActive,
    #[serde(rename = "optimized-active")]
    OptimizedActive,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::RandomNoActive => "random-noactive",
            Method::OptimizedNoActive => "optimized-noactive",
            Method::OptimizedActive => "optimized-active",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Method::RandomNoActive, Method::OptimizedNoActive, Method::OptimizedActive]
            .into_iter()
            .find(|m| m.name() == s)
    }

    fn is_active(self) -> bool {
        self == Method::OptimizedActive
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Files {
        nodes: PathBuf,
        edges: PathBuf,
        trips: PathBuf,
    },
    Synth(SynthConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Greedy,
    Exact,
}

fn default_runs() -> usize {
    DEFAULT_RUNS
}
fn default_replications() -> usize {
    20
}
fn default_k() -> f64 {
    DEFAULT_K
}
fn default_time_limit() -> f64 {
    60.0
}
fn default_requirement_beta() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub source: DataSource,
    pub methods: Vec<Method>,
    pub budgets: Vec<u32>,
    pub deltas: Vec<f64>,
    pub betas: Vec<f64>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub estimation_runs: usize,
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default)]
    pub clean: CleanParams,
    #[serde(default)]
    pub solver: Solver,
    #[serde(default = "default_time_limit")]
    pub exact_time_limit_s: f64,
    /// Guidance acceptance used by `sensor_requirement`.
    #[serde(default = "default_requirement_beta")]
    pub requirement_beta: f64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty()
            || self.budgets.is_empty()
            || self.deltas.is_empty()
            || self.betas.is_empty()
        {
            return Err(Error::ConfigInfeasible("sweep lists must be non-empty".into()));
        }
        if self.replications == 0 || self.estimation_runs == 0 {
            return Err(Error::ConfigInfeasible("replications must be at least 1".into()));
        }
        if let Some(b) = self.betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::ConfigInfeasible(format!("beta {b} outside [0,1]")));
        }
        if !(0.0..=1.0).contains(&self.requirement_beta) {
            return Err(Error::ConfigInfeasible("requirement beta outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Everything upstream of allocation, shared by every experiment cell.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub network: RoadNetwork,
    pub log: TripLog,
    pub clean_report: CleanReport,
    pub fleet: FleetPlan,
    pub matrix: CoverageMatrix,
    pub lengths: Vec<f64>,
}

pub fn load_source(source: &DataSource, clean: &CleanParams) -> Result<(RoadNetwork, TripLog, CleanReport)> {
    let (net, raw) = match source {
        DataSource::Files { nodes, edges, trips } => {
            let net = RoadNetwork::load_files(nodes, edges).stage("load network")?;
            let (raw, report) = parse_raw_trips(std::fs::File::open(trips)?).stage("parse trips")?;
            log::info!(
                "parsed {} trips ({} dropped)",
                raw.len(),
                report.dropped()
            );
            (net, raw)
        }
        DataSource::Synth(cfg) => {
            let city = generate(cfg).stage("synthesize")?;
            (city.network, city.trips)
        }
    };
    let (log, report) = clean_trips(&raw, &net, clean).stage("clean trips")?;
    Ok((net, log, report))
}

impl Scenario {
    pub fn prepare(spec: &ExperimentSpec) -> Result<Self> {
        let (network, log, clean_report) = load_source(&spec.source, &spec.clean)?;
        Self::from_parts(network, log, clean_report, spec.estimation_runs, spec.seed)
    }

    pub fn from_parts(
        network: RoadNetwork,
        log: TripLog,
        clean_report: CleanReport,
        runs: usize,
        seed: u64,
    ) -> Result<Self> {
        let fleet = initial_bike_counts(&log);
        let sample = mean_coverage(&log, &fleet, runs, seed).stage("estimate coverage")?;
        let matrix = estimate_probabilities(&sample, &fleet).stage("estimate coverage")?;
        log::info!(
            "{} stands, {} trips, {} bikes, {} nonzero visit expectations",
            log.stand_count(),
            log.trips.len(),
            fleet.total_bikes(),
            matrix.p.len()
        );
        let lengths = network.lengths();
        Ok(Scenario {
            network,
            log,
            clean_report,
            fleet,
            matrix,
            lengths,
        })
    }

    pub fn instance(&self, budget: u32, k: f64) -> Result<MilpInstance> {
        build_instance(&self.matrix, &self.network, &self.fleet, budget, k).stage("build allocation model")
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Replication seed for evaluation replays. Independent of method, budget
/// and beta so cells are compared under common random numbers, and disjoint
/// from the estimation seeds.
pub fn eval_seed(seed: u64, rep: usize) -> u64 {
    splitmix64(seed ^ 0x5EED_0E7A_1000_0000).wrapping_add(rep as u64)
}

fn alloc_seed(seed: u64, budget: u32, rep: usize) -> u64 {
    splitmix64(splitmix64(seed ^ 0xA110_C000) ^ ((budget as u64) << 32 | rep as u64))
}

fn optimize(inst: &MilpInstance, solver: Solver, time_limit_s: f64) -> Result<AllocationPlan> {
    match solver {
        Solver::Greedy => solve_greedy(inst),
        Solver::Exact => solve_exact(inst, time_limit_s),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: Method,
    pub budget: u32,
    pub delta_h: f64,
    pub beta: f64,
    pub rep: usize,
    pub phi_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub budget: u32,
    pub delta_h: f64,
    pub beta: f64,
    pub reps: usize,
    pub mean_phi_pct: f64,
    pub std_phi_pct: f64,
}

impl SummaryRow {
    pub fn std_err(&self) -> f64 {
        self.std_phi_pct / (self.reps as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentResult {
    pub fn find(&self, method: Method, budget: u32, delta_h: f64, beta: f64) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| {
            r.method == method && r.budget == budget && r.delta_h == delta_h && r.beta == beta
        })
    }

    pub fn write_rows<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["method", "budget", "delta_h", "beta", "rep", "phi_pct"])?;
        for r in &self.rows {
            w.write_record([
                r.method.name().to_string(),
                r.budget.to_string(),
                r.delta_h.to_string(),
                r.beta.to_string(),
                r.rep.to_string(),
                r.phi_pct.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record([
            "method",
            "budget",
            "delta_h",
            "beta",
            "reps",
            "mean_phi_pct",
            "std_phi_pct",
        ])?;
        for r in &self.summary {
            w.write_record([
                r.method.name().to_string(),
                r.budget.to_string(),
                r.delta_h.to_string(),
                r.beta.to_string(),
                r.reps.to_string(),
                r.mean_phi_pct.to_string(),
                r.std_phi_pct.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One replay cell: which allocation, which guidance rate, which replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub budget: u32,
    pub beta: f64,
    pub rep: usize,
}

/// Allocation and trajectories behind one result cell, for auditing or
/// dumping.
pub fn replay_cell(
    scenario: &Scenario,
    spec: &ExperimentSpec,
    cell: Cell,
) -> Result<(AllocationPlan, SimConfig, Vec<BikeTrajectory>)> {
    let inst = scenario.instance(cell.budget, spec.k)?;
    let alloc = match cell.method {
        Method::RandomNoActive => random_allocation(&inst, alloc_seed(spec.seed, cell.budget, cell.rep))?,
        _ => optimize(&inst, spec.solver, spec.exact_time_limit_s)?,
    };
    let cfg = SimConfig {
        seed: eval_seed(spec.seed, cell.rep),
        beta: cell.beta,
        equipped: scenario.fleet.equip(&alloc.n),
    };
    let traj = simulate(&scenario.log, &scenario.fleet, &cfg).stage("simulate")?;
    Ok((alloc, cfg, traj))
}

/// Writes the allocation and trajectories behind one cell as
/// `<dir>/<method>_b<budget>_beta<beta>_rep<rep>.{alloc,traj}.json`, so
/// its score can be recomputed offline.
pub fn dump_cell(scenario: &Scenario, spec: &ExperimentSpec, cell: Cell, dir: &Path) -> Result<PathBuf> {
    let (alloc, cfg, traj) = replay_cell(scenario, spec, cell)?;
    std::fs::create_dir_all(dir)?;
    let stem = format!(
        "{}_b{}_beta{}_rep{}",
        cell.method.name(),
        cell.budget,
        cell.beta,
        cell.rep
    );
    let inst = scenario.instance(cell.budget, spec.k)?;
    alloc.write_json(&inst, BufWriter::new(File::create(dir.join(format!("{stem}.alloc.json")))?))?;
    let traj_path = dir.join(format!("{stem}.traj.json"));
    write_trajectories(&scenario.log, &cfg, &traj, BufWriter::new(File::create(&traj_path)?))?;
    Ok(traj_path)
}

/// All cells an experiment replays, in result order.
pub fn cells(spec: &ExperimentSpec) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &method in &spec.methods {
        let betas: Vec<f64> = if method.is_active() { spec.betas.clone() } else { vec![0.0] };
        for &budget in &spec.budgets {
            for rep in 0..spec.replications {
                for &beta in &betas {
                    cells.push(Cell { method, budget, beta, rep });
                }
            }
        }
    }
    cells
}

fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, u32, u64, u64), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.method, r.budget, r.delta_h.to_bits(), r.beta.to_bits()))
            .or_default()
            .push(r.phi_pct);
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((method, budget, d, b), phis)| SummaryRow {
            method,
            budget,
            delta_h: f64::from_bits(d),
            beta: f64::from_bits(b),
            reps: phis.len(),
            mean_phi_pct: mean(&phis),
            std_phi_pct: std_dev(&phis),
        })
        .collect();
    out.sort_by(|a, b| {
        (a.method, a.budget)
            .cmp(&(b.method, b.budget))
            .then(a.delta_h.total_cmp(&b.delta_h))
            .then(a.beta.total_cmp(&b.beta))
    });
    out
}

/// Runs every (method, budget, beta, replication) cell and scores it at every
/// sensing interval. NoActive methods replay with beta = 0.
pub fn run_experiment(scenario: &Scenario, spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let grids: Vec<IntervalGrid> = spec
        .deltas
        .iter()
        .map(|&d| IntervalGrid::for_log(&scenario.log, d))
        .collect::<Result<_>>()
        .stage("interval grid")?;

    // allocation per (method, budget, rep); optimized plans are shared across reps
    let needs_opt = spec.methods.iter().any(|m| *m != Method::RandomNoActive);
    let optimized: BTreeMap<u32, AllocationPlan> = if needs_opt {
        spec.budgets
            .par_iter()
            .map(|&b| {
                let inst = scenario.instance(b, spec.k)?;
                Ok((b, optimize(&inst, spec.solver, spec.exact_time_limit_s).stage("allocate")?))
            })
            .collect::<Result<_>>()?
    } else {
        BTreeMap::new()
    };

    let nested: Vec<Vec<ResultRow>> = cells(spec)
        .par_iter()
        .map(|cell| {
            let alloc = match cell.method {
                Method::RandomNoActive => {
                    let inst = scenario.instance(cell.budget, spec.k)?;
                    random_allocation(&inst, alloc_seed(spec.seed, cell.budget, cell.rep))
                        .stage("allocate")?
                }
                _ => optimized[&cell.budget].clone(),
            };
            let equipped = scenario.fleet.equip(&alloc.n);
            let cfg = SimConfig {
                seed: eval_seed(spec.seed, cell.rep),
                beta: cell.beta,
                equipped,
            };
            let traj = simulate(&scenario.log, &scenario.fleet, &cfg).stage("simulate")?;
            grids
                .iter()
                .map(|g| {
                    let rep = sensing_report(&traj, &cfg.equipped, &scenario.lengths, g).stage("score")?;
                    Ok(ResultRow {
                        method: cell.method,
                        budget: cell.budget,
                        delta_h: g.delta_h(),
                        beta: cell.beta,
                        rep: cell.rep,
                        phi_pct: rep.phi_pct,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<ResultRow> = nested.into_iter().flatten().collect();
    rows.sort_by(|a, b| {
        (a.method, a.budget)
            .cmp(&(b.method, b.budget))
            .then(a.delta_h.total_cmp(&b.delta_h))
            .then(a.beta.total_cmp(&b.beta))
            .then(a.rep.cmp(&b.rep))
    });
    let summary = summarize(&rows);
    Ok(ExperimentResult { rows, summary })
}

/// Loads the data named by the spec and runs the full sweep.
pub fn run_pipeline(spec: &ExperimentSpec) -> Result<(Scenario, ExperimentResult)> {
    spec.validate()?;
    let scenario = Scenario::prepare(spec)?;
    let result = run_experiment(&scenario, spec)?;
    Ok((scenario, result))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaGain {
    pub budget: u32,
    pub delta_h: f64,
    pub from_beta: f64,
    pub to_beta: f64,
    pub gain_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaSweep {
    pub result: ExperimentResult,
    pub gains: Vec<BetaGain>,
}

impl BetaSweep {
    /// Mean gain between two swept betas, `None` if either is missing.
    pub fn gain_between(&self, budget: u32, delta_h: f64, from: f64, to: f64) -> Option<f64> {
        let get = |b| self.result.find(Method::OptimizedActive, budget, delta_h, b);
        Some(get(to)?.mean_phi_pct - get(from)?.mean_phi_pct)
    }

    pub fn write_gains<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["budget", "delta_h", "from_beta", "to_beta", "gain_pct"])?;
        for g in &self.gains {
            w.write_record([
                g.budget.to_string(),
                g.delta_h.to_string(),
                g.from_beta.to_string(),
                g.to_beta.to_string(),
                g.gain_pct.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Optimized allocation with guidance at every beta of the spec, plus the
/// discrete gain between consecutive betas.
pub fn beta_sweep(scenario: &Scenario, spec: &ExperimentSpec) -> Result<BetaSweep> {
    let mut s = spec.clone();
    s.methods = vec![Method::OptimizedActive];
    s.betas.sort_by(f64::total_cmp);
    s.betas.dedup();
    let result = run_experiment(scenario, &s)?;
    let mut gains = Vec::new();
    for &budget in &s.budgets {
        for &delta_h in &s.deltas {
            let dh = IntervalGrid::for_log(&scenario.log, delta_h)?.delta_h();
            for w in s.betas.windows(2) {
                let a = result.find(Method::OptimizedActive, budget, dh, w[0]);
                let b = result.find(Method::OptimizedActive, budget, dh, w[1]);
                if let (Some(a), Some(b)) = (a, b) {
                    gains.push(BetaGain {
                        budget,
                        delta_h: dh,
                        from_beta: w[0],
                        to_beta: w[1],
                        gain_pct: b.mean_phi_pct - a.mean_phi_pct,
                    });
                }
            }
        }
    }
    Ok(BetaSweep { result, gains })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Requirement {
    pub delta_h: f64,
    pub target_phi_pct: f64,
    /// Smallest budget reaching the target; `None` when even the whole fleet
    /// falls short.
    pub budget: Option<u32>,
    pub phi_at_budget: Option<f64>,
    /// Every `(budget, mean Φ)` evaluated, by budget.
    pub probes: Vec<(u32, f64)>,
    /// Probes whose mean Φ fell below a smaller probed budget's.
    pub monotonicity_violations: usize,
}

/// Smallest sensor budget whose mean Φ reaches `target_phi_pct`, per sensing
/// interval, by doubling then bisection over greedy allocations replayed
/// with `spec.requirement_beta`.
pub fn sensor_requirement(
    scenario: &Scenario,
    spec: &ExperimentSpec,
    target_phi_pct: f64,
) -> Result<Vec<Requirement>> {
    spec.validate()?;
    let grids: Vec<IntervalGrid> = spec
        .deltas
        .iter()
        .map(|&d| IntervalGrid::for_log(&scenario.log, d))
        .collect::<Result<_>>()?;
    let capacity = scenario.fleet.total_bikes().min(u32::MAX as usize) as u32;
    let mut cache: BTreeMap<u32, Vec<f64>> = BTreeMap::new();

    let compute = |budget: u32| -> Result<Vec<f64>> {
        Ok(if budget == 0 {
            vec![0.0; grids.len()]
        } else {
            let inst = scenario.instance(budget, spec.k)?;
            let alloc = optimize(&inst, spec.solver, spec.exact_time_limit_s)?;
            let equipped = scenario.fleet.equip(&alloc.n);
            let per_rep: Vec<Vec<f64>> = (0..spec.replications)
                .into_par_iter()
                .map(|rep| {
                    let cfg = SimConfig {
                        seed: eval_seed(spec.seed, rep),
                        beta: spec.requirement_beta,
                        equipped: equipped.clone(),
                    };
                    let traj = simulate(&scenario.log, &scenario.fleet, &cfg)?;
                    grids
                        .iter()
                        .map(|g| Ok(sensing_report(&traj, &equipped, &scenario.lengths, g)?.phi_pct))
                        .collect()
                })
                .collect::<Result<_>>()?;
            (0..grids.len())
                .map(|gi| mean(&per_rep.iter().map(|r| r[gi]).collect::<Vec<_>>()))
                .collect()
        })
    };

    let mut out = Vec::new();
    for (gi, g) in grids.iter().enumerate() {
        let mut phi = |b: u32| -> Result<f64> {
            if !cache.contains_key(&b) {
                cache.insert(b, compute(b)?);
            }
            Ok(cache[&b][gi])
        };
        let budget = if target_phi_pct <= 0.0 {
            Some(0)
        } else if capacity == 0 || phi(capacity)? < target_phi_pct {
            None
        } else {
            // doubling to bracket, then bisection on (lo, hi]
            let mut lo = 0u32;
            let mut hi = 1u32.min(capacity);
            while phi(hi)? < target_phi_pct {
                lo = hi;
                hi = hi.saturating_mul(2).min(capacity);
            }
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if phi(mid)? >= target_phi_pct {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Some(hi)
        };
        let probes: Vec<(u32, f64)> = cache.iter().map(|(&b, v)| (b, v[gi])).collect();
        let mut running_max = f64::NEG_INFINITY;
        let mut violations = 0;
        for &(_, p) in &probes {
            if p + 1e-12 < running_max {
                violations += 1;
            }
            running_max = running_max.max(p);
        }
        if violations > 0 {
            log::warn!("Φ(budget) not monotone at Δ = {} h: {violations} probes", g.delta_h());
        }
        out.push(Requirement {
            delta_h: g.delta_h(),
            target_phi_pct,
            budget,
            phi_at_budget: budget.map(|b| probes.iter().find(|p| p.0 == b).map_or(0.0, |p| p.1)),
            probes,
            monotonicity_violations: violations,
        });
    }
    Ok(out)
}
