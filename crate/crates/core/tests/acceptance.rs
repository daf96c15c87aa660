//! Acceptance suite. Runs every criterion in sequence (timing limits are
//! measured without other tests competing for cores), prints one line per
//! criterion and fails if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use velosense::allocation::lp::export_lp;
use velosense::allocation::solve_exact;
use velosense::coverage_model::linearity_study;
use velosense::fleet_sim::{initial_bike_counts, simulate, BikeId, FleetPlan, SimConfig};
use velosense::harness::{
    beta_sweep, run_experiment, sensor_requirement, DataSource, ExperimentSpec, Method, Scenario,
    Solver,
};
use velosense::metrics::{sensing_report, IntervalGrid};
use velosense::stats::median;
use velosense::synth::SynthConfig;
use velosense::trips::{CleanParams, TripLog};
use velosense::Error;

const REFERENCE_SEED: u64 = 2024;
const SWEEP_BUDGETS: [u32; 5] = [5, 10, 20, 40, 80];

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
    /// Reported but not gating.
    Diagnostic(bool, String),
}

fn reference() -> (velosense::network::RoadNetwork, TripLog) {
    common::city(&SynthConfig::reference(REFERENCE_SEED))
}

fn reference_spec(methods: Vec<Method>, deltas: Vec<f64>, betas: Vec<f64>) -> ExperimentSpec {
    ExperimentSpec {
        source: DataSource::Synth(SynthConfig::reference(REFERENCE_SEED)),
        methods,
        budgets: SWEEP_BUDGETS.to_vec(),
        deltas,
        betas,
        replications: 20,
        seed: 1,
        estimation_runs: 20,
        k: 1.0,
        clean: CleanParams::default(),
        solver: Solver::Greedy,
        exact_time_limit_s: 10.0,
        requirement_beta: 1.0,
    }
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn c1_solver_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instances: Vec<_> = (0..200).map(|_| common::random_instance(&mut rng, 5)).collect();
    let start = Instant::now();
    let mut mismatches = 0;
    for inst in &instances {
        let plan = solve_exact(inst, 10.0).unwrap();
        let oracle =
            common::brute_force(&common::dense_p(inst), &inst.lengths, &inst.caps, inst.budget, inst.k);
        if plan.objective_m != oracle || plan.gap != Some(0.0) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("{mismatches} mismatches over 200 instances, {elapsed:.2?} (limit 10 s)"),
    )
}

const HIGHS_SCRIPT: &str = r#"
import sys, highspy
h = highspy.Highs()
h.setOptionValue("output_flag", False)
h.setOptionValue("mip_rel_gap", 0.0)
h.setOptionValue("mip_abs_gap", 0.0)
h.setOptionValue("mip_feasibility_tolerance", 1e-9)
h.readModel(sys.argv[1])
h.run()
if h.getModelStatus() != highspy.HighsModelStatus.kOptimal:
    sys.exit("status " + str(h.getModelStatus()))
print(repr(h.getInfo().objective_function_value))
"#;

enum External {
    Highspy,
    Binary(&'static str),
}

fn find_external_solver() -> Option<External> {
    let python_ok = Command::new("python3")
        .args(["-c", "import highspy"])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false);
    if python_ok {
        return Some(External::Highspy);
    }
    for bin in ["highs", "cbc", "glpsol"] {
        if Command::new(bin).arg("--version").output().is_ok() {
            return Some(External::Binary(bin));
        }
    }
    None
}

fn solve_external(solver: &External, lp: &std::path::Path) -> Result<f64, String> {
    let out = match solver {
        External::Highspy => Command::new("python3").arg("-c").arg(HIGHS_SCRIPT).arg(lp).output(),
        External::Binary("highs") => Command::new("highs").arg(lp).output(),
        External::Binary("cbc") => Command::new("cbc").arg(lp).arg("solve").output(),
        External::Binary(_) => Command::new("glpsol").arg("--lp").arg(lp).output(),
    }
    .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let text = String::from_utf8_lossy(&out.stdout);
    match solver {
        External::Highspy => text.trim().parse().map_err(|e| format!("{e}: {text}")),
        _ => text
            .lines()
            .filter(|l| l.to_ascii_lowercase().contains("objective"))
            .filter_map(|l| l.split_whitespace().filter_map(|t| t.parse::<f64>().ok()).last())
            .last()
            .ok_or_else(|| format!("no objective in output: {text}")),
    }
}

fn c2_export_parity() -> Outcome {
    let Some(solver) = find_external_solver() else {
        return Outcome::Skip("no external MILP solver found (highspy, highs, cbc, glpsol)".into());
    };
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let inst = common::random_instance(&mut rng, 5);
        let path: PathBuf = dir.path().join(format!("inst{i}.lp"));
        export_lp(&inst, std::fs::File::create(&path).unwrap()).unwrap();
        let internal = solve_exact(&inst, 10.0).unwrap().objective_m;
        let external = match solve_external(&solver, &path) {
            Ok(v) => v,
            Err(e) => return Outcome::Fail(format!("instance {i}: external solver failed: {e}")),
        };
        worst = worst.max((external - internal).abs() / internal.abs().max(1.0));
    }
    let name = match solver {
        External::Highspy => "highspy",
        External::Binary(b) => b,
    };
    verdict(worst <= 1e-6, format!("20 instances via {name}, worst relative difference {worst:.2e}"))
}

/// Stand occupancy rebuilt from the log alone, arrivals first.
fn min_occupancy(log: &TripLog, plan: &FleetPlan) -> i64 {
    let (t0, t1) = log.horizon;
    let mut delta = vec![vec![0i64; (t1 - t0 + 1) as usize]; plan.counts.len()];
    for t in &log.trips {
        delta[t.origin.0][(t.start_min - t0) as usize] -= 1;
        if t.end_min <= t1 {
            delta[t.dest.0][(t.end_min - t0) as usize] += 1;
        }
    }
    let mut lowest = i64::MAX;
    for (s, d) in delta.iter().enumerate() {
        let mut idle = plan.counts[s] as i64;
        for &x in d {
            idle += x;
            lowest = lowest.min(idle);
        }
    }
    lowest
}

fn c3_fleet_sizing() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    for i in 0..50 {
        let (_, log) = common::small_city(1000 + i, 10, 20, 1000);
        let plan = initial_bike_counts(&log);
        if min_occupancy(&log, &plan) < 0 {
            failures.push(format!("log {i}: occupancy below zero"));
        }
        if let Err(e) = simulate(&log, &plan, &SimConfig::passive(i)) {
            failures.push(format!("log {i}: {e}"));
        }
        let positive: Vec<usize> = (0..plan.counts.len()).filter(|&s| plan.counts[s] > 0).collect();
        let s = positive[rng.gen_range(0..positive.len())];
        let mut counts = plan.counts.clone();
        counts[s] -= 1;
        match simulate(&log, &FleetPlan::from_counts(counts), &SimConfig::passive(i)) {
            Err(Error::InfeasiblePlan { .. }) => {}
            other => failures.push(format!("log {i}: b[{s}] - 1 gave {:?}", other.map(|_| ()))),
        }
    }
    let elapsed = start.elapsed();
    verdict(
        failures.is_empty() && elapsed < Duration::from_secs(5),
        if failures.is_empty() {
            format!("50 logs, minimal and feasible, {elapsed:.2?} (limit 5 s)")
        } else {
            failures.join("; ")
        },
    )
}

fn c4_replay_invariants() -> Outcome {
    let start = Instant::now();
    let (_, log) = reference();
    let plan = initial_bike_counts(&log);
    let home = plan.home_stands();
    let equipped = plan.equip(&vec![2; plan.counts.len()]);
    let mut problems = Vec::new();
    for beta in [0.0, 0.5, 1.0] {
        let cfg = SimConfig { seed: 4, beta, equipped: equipped.clone() };
        let traj = simulate(&log, &plan, &cfg).unwrap();
        let mut served = vec![0u32; log.trips.len()];
        for t in &traj {
            let mut at = home[t.bike.0];
            let mut free = log.horizon.0;
            for &i in &t.served {
                served[i] += 1;
                let trip = &log.trips[i];
                if trip.origin != at || trip.start_min < free {
                    problems.push(format!("beta {beta}: bike {} breaks continuity or overlaps", t.bike.0));
                }
                at = trip.dest;
                free = trip.end_min;
            }
        }
        if served.iter().any(|&c| c != 1) {
            problems.push(format!("beta {beta}: some trip not served exactly once"));
        }
        if beta == 0.0 && traj != simulate(&log, &plan, &SimConfig::passive(4)).unwrap() {
            problems.push("beta 0 differs from the unguided replay".into());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        problems.is_empty() && elapsed < Duration::from_secs(30),
        if problems.is_empty() {
            format!("{} trips, {} bikes, 3 betas, {elapsed:.2?} (limit 30 s)", log.trips.len(), plan.total_bikes())
        } else {
            problems.join("; ")
        },
    )
}

fn c5_selection_frequency() -> Outcome {
    // one trip; its origin holds one equipped and one plain bike
    let mut cfg = common::small_config(5, 2, 2, 1);
    cfg.block_m = 600.0;
    let (_, log) = common::city(&cfg);
    let origin = log.trips[0].origin.0;
    let mut counts = vec![0; log.stand_count()];
    counts[origin] = 2;
    let plan = FleetPlan::from_counts(counts);
    let equipped: BTreeSet<BikeId> = [plan.bikes[origin][0]].into_iter().collect();
    let reps = 10_000;
    let hits = (0..reps)
        .filter(|&seed| {
            let cfg = SimConfig { seed, beta: 0.5, equipped: equipped.clone() };
            let traj = simulate(&log, &plan, &cfg).unwrap();
            traj.iter().any(|t| equipped.contains(&t.bike) && !t.served.is_empty())
        })
        .count();
    let freq = hits as f64 / reps as f64;
    verdict((freq - 0.75).abs() <= 0.02, format!("equipped chosen in {freq:.4} of {reps} replays (0.75 ± 0.02)"))
}

fn c6_linearity() -> Outcome {
    let (_, log) = reference();
    let plan = initial_bike_counts(&log);
    let fits = linearity_study(&log, &plan, 20, 6, 5, 5.0).unwrap();
    let r2: Vec<f64> = fits.iter().filter_map(|f| f.fit.r2).collect();
    match median(&r2) {
        Some(m) => verdict(m >= 0.9, format!("median R² {m:.4} over {} pairs with N̄ ≥ 5 (need ≥ 0.9)", r2.len())),
        None => Outcome::Fail("no (stand, segment) pair qualified".into()),
    }
}

fn c7_method_ordering() -> Outcome {
    let spec = reference_spec(
        vec![Method::RandomNoActive, Method::OptimizedNoActive, Method::OptimizedActive],
        vec![16.0],
        vec![1.0],
    );
    let scenario = Scenario::prepare(&spec).unwrap();
    let res = run_experiment(&scenario, &spec).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for &b in &spec.budgets {
        let rand = res.find(Method::RandomNoActive, b, 16.0, 0.0).unwrap().mean_phi_pct;
        let opt = res.find(Method::OptimizedNoActive, b, 16.0, 0.0).unwrap().mean_phi_pct;
        let act = res.find(Method::OptimizedActive, b, 16.0, 1.0).unwrap().mean_phi_pct;
        ok &= act >= opt && opt > rand;
        lines.push(format!("b={b}: {rand:.2} < {opt:.2} <= {act:.2}"));
    }
    verdict(ok, format!("Δ=16 h, 20 reps; {}", lines.join(", ")))
}

/// Gated at Δ ∈ {1, 4} h, where guidance matters; Δ = 16 h is reported as a
/// diagnostic since the coarse interval saturates at small budgets.
fn c8_beta_returns() -> (Outcome, Outcome) {
    let betas = vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    let spec = reference_spec(vec![Method::OptimizedActive], vec![16.0, 4.0, 1.0], betas.clone());
    let scenario = Scenario::prepare(&spec).unwrap();
    let sweep = beta_sweep(&scenario, &spec).unwrap();
    let check = |delta: f64| -> Vec<String> {
        let mut bad = Vec::new();
        for &b in &spec.budgets {
            let rows: Vec<_> = betas
                .iter()
                .map(|&beta| sweep.result.find(Method::OptimizedActive, b, delta, beta).unwrap())
                .collect();
            for w in rows.windows(2) {
                let se = w[0].std_err().max(w[1].std_err());
                if w[1].mean_phi_pct < w[0].mean_phi_pct - se {
                    bad.push(format!(
                        "Δ={delta} b={b}: Φ({})={:.3} < Φ({})={:.3} - SE {se:.3}",
                        w[1].beta, w[1].mean_phi_pct, w[0].beta, w[0].mean_phi_pct
                    ));
                }
            }
            let early = sweep.gain_between(b, delta, 0.0, 0.4).unwrap();
            let late = sweep.gain_between(b, delta, 0.6, 1.0).unwrap();
            if late >= early {
                bad.push(format!("Δ={delta} b={b}: gain 0.6→1.0 {late:.3} ≥ gain 0→0.4 {early:.3}"));
            }
        }
        bad
    };
    let mut gated = check(1.0);
    gated.extend(check(4.0));
    let gated = verdict(
        gated.is_empty(),
        if gated.is_empty() {
            format!("Δ ∈ {{1, 4}} h, budgets {SWEEP_BUDGETS:?}: monotone within 1 SE, 0.6→1.0 gain below 0→0.4 gain")
        } else {
            gated.join("; ")
        },
    );
    let coarse = check(16.0);
    let diag = Outcome::Diagnostic(
        coarse.is_empty(),
        if coarse.is_empty() { "Δ=16 h: monotone and diminishing".into() } else { coarse.join("; ") },
    );
    (gated, diag)
}

fn c9_metric_properties() -> Outcome {
    let (net, log) = reference();
    let plan = initial_bike_counts(&log);
    let traj = simulate(&log, &plan, &SimConfig::passive(9)).unwrap();
    let lengths = net.lengths();
    let grids: Vec<IntervalGrid> =
        [16.0, 8.0, 4.0, 1.0].iter().map(|&d| IntervalGrid::for_log(&log, d).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let fleet = plan.total_bikes();
    let mut problems = Vec::new();
    for pair in 0..100 {
        let small: BTreeSet<BikeId> = (0..fleet).filter(|_| rng.gen_bool(0.01)).map(BikeId).collect();
        let mut large = small.clone();
        large.extend((0..fleet).filter(|_| rng.gen_bool(0.02)).map(BikeId));
        let a = sensing_report(&traj, &small, &lengths, &grids[0]).unwrap().phi_pct;
        let b = sensing_report(&traj, &large, &lengths, &grids[0]).unwrap().phi_pct;
        if !(0.0..=100.0).contains(&a) || !(0.0..=100.0).contains(&b) || a > b {
            problems.push(format!("pair {pair}: {a} vs {b}"));
        }
    }
    let some: BTreeSet<BikeId> = (0..fleet).step_by(10).map(BikeId).collect();
    let phis: Vec<f64> =
        grids.iter().map(|g| sensing_report(&traj, &some, &lengths, g).unwrap().phi_pct).collect();
    if phis.windows(2).any(|w| w[1] > w[0]) {
        problems.push(format!("refinement violated: {phis:?}"));
    }
    let all: BTreeSet<BikeId> = (0..fleet).map(BikeId).collect();
    let phi_all = sensing_report(&traj, &all, &lengths, &grids[0]).unwrap().phi_pct;
    let mut touched = vec![false; net.segment_count()];
    for t in &log.trips {
        for (e, m) in t.events() {
            if m <= log.horizon.1 {
                touched[e.0] = true;
            }
        }
    }
    let covered: f64 = lengths.iter().zip(&touched).filter(|(_, &t)| t).map(|(l, _)| l).sum();
    let oracle = 100.0 * covered / net.total_length_m();
    if phi_all != oracle {
        problems.push(format!("set-union oracle {oracle} vs Φ {phi_all}"));
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("100 superset pairs, Δ refinement {phis:.2?}, union oracle {oracle:.3} % exact")
        } else {
            problems.join("; ")
        },
    )
}

fn c10_real_data() -> Outcome {
    let vars = ["VELOSENSE_NODES", "VELOSENSE_EDGES", "VELOSENSE_TRIPS"];
    let paths: Vec<Option<PathBuf>> = vars.iter().map(|v| std::env::var_os(v).map(PathBuf::from)).collect();
    let [Some(nodes), Some(edges), Some(trips)] = [paths[0].clone(), paths[1].clone(), paths[2].clone()] else {
        return Outcome::Skip(format!("set {} to run against real data", vars.join(", ")));
    };
    let spec = ExperimentSpec {
        source: DataSource::Files { nodes, edges, trips },
        methods: vec![Method::OptimizedActive],
        budgets: vec![100],
        deltas: vec![16.0, 8.0, 4.0, 1.0],
        betas: vec![1.0],
        replications: 20,
        seed: 10,
        estimation_runs: 20,
        k: 1.0,
        clean: CleanParams::default(),
        solver: Solver::Greedy,
        exact_time_limit_s: 60.0,
        requirement_beta: 1.0,
    };
    let scenario = match Scenario::prepare(&spec) {
        Ok(s) => s,
        Err(e) => return Outcome::Fail(format!("could not prepare real data: {e}")),
    };
    let mut bad = Vec::new();
    let fleet = scenario.fleet.total_bikes() as f64;
    if (fleet - 6259.0).abs() > 0.05 * 6259.0 {
        bad.push(format!("fleet {fleet} outside 6259 ± 5%"));
    }
    let stands = scenario.log.stand_count();
    if stands != 646 {
        bad.push(format!("{stands} stands, expected 646"));
    }
    let res = run_experiment(&scenario, &spec).unwrap();
    let phi = res.find(Method::OptimizedActive, 100, 16.0, 1.0).unwrap().mean_phi_pct;
    if (phi - 70.0).abs() > 10.0 {
        bad.push(format!("Φ(100, 16 h) = {phi:.2} outside 70 ± 10"));
    }
    let req = sensor_requirement(&scenario, &spec, 50.0).unwrap();
    for (r, expect) in req.iter().zip([41.0, 54.0, 121.0, 800.0]) {
        match r.budget {
            Some(b) if (b as f64 - expect).abs() <= 0.25 * expect => {}
            other => bad.push(format!("Δ={} h needs {other:?} sensors, expected {expect} ± 25%", r.delta_h)),
        }
    }
    verdict(
        bad.is_empty(),
        if bad.is_empty() {
            format!("fleet {fleet}, {stands} stands, Φ(100, 16 h) {phi:.2}")
        } else {
            bad.join("; ")
        },
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(String, Outcome)> = vec![
        ("1 solver oracle".into(), c1_solver_oracle()),
        ("2 LP export parity".into(), c2_export_parity()),
        ("3 fleet sizing".into(), c3_fleet_sizing()),
        ("4 replay invariants".into(), c4_replay_invariants()),
        ("5 selection frequency".into(), c5_selection_frequency()),
        ("6 linearity".into(), c6_linearity()),
        ("7 method ordering".into(), c7_method_ordering()),
    ];
    let (beta_gated, beta_coarse) = c8_beta_returns();
    results.push(("8 beta returns".into(), beta_gated));
    results.push(("8 beta returns (Δ=16 h diagnostic)".into(), beta_coarse));
    results.push(("9 metric properties".into(), c9_metric_properties()));
    results.push(("10 real data".into(), c10_real_data()));

    let mut failed = Vec::new();
    for (name, outcome) in &results {
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => ("FAIL", d),
            Outcome::Skip(d) => ("SKIP", d),
            Outcome::Diagnostic(true, d) => ("INFO met", d),
            Outcome::Diagnostic(false, d) => ("INFO not met, non-gating", d),
        };
        println!("criterion {name}: {tag}: {detail}");
        if matches!(outcome, Outcome::Fail(_)) {
            failed.push(name.clone());
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
