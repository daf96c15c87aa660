mod common;

use std::collections::BTreeSet;

use velosense::fleet_sim::{read_trajectories, BikeId};
use velosense::harness::{
    beta_sweep, cells, dump_cell, run_experiment, run_pipeline, sensor_requirement,
    DataSource, ExperimentSpec, Method, Scenario, Solver,
};
use velosense::metrics::{sensing_report, IntervalGrid};
use velosense::allocation::AllocationPlan;
use velosense::trips::CleanParams;

fn spec(methods: Vec<Method>) -> ExperimentSpec {
    ExperimentSpec {
        source: DataSource::Synth(common::small_config(12, 10, 15, 1500)),
        methods,
        budgets: vec![3, 8],
        deltas: vec![16.0, 4.0, 1.0],
        betas: vec![0.0, 0.5, 1.0],
        replications: 3,
        seed: 77,
        estimation_runs: 4,
        k: 1.0,
        clean: CleanParams::default(),
        solver: Solver::Greedy,
        exact_time_limit_s: 10.0,
        requirement_beta: 1.0,
    }
}

fn all_methods() -> Vec<Method> {
    vec![Method::RandomNoActive, Method::OptimizedNoActive, Method::OptimizedActive]
}

#[test]
fn single_cell_pipeline() {
    let mut s = spec(vec![Method::OptimizedNoActive]);
    s.budgets = vec![1];
    s.deltas = vec![16.0];
    s.replications = 1;
    let (_, res) = run_pipeline(&s).unwrap();
    assert_eq!(res.rows.len(), 1);
    assert!((0.0..=100.0).contains(&res.rows[0].phi_pct));
    let mut text = Vec::new();
    res.write_rows(&mut text).unwrap();
    assert!(String::from_utf8(text).unwrap().starts_with("method,budget,delta_h,beta,rep,phi_pct\n"));
}

#[test]
fn pipeline_is_deterministic_and_ordered() {
    let s = spec(all_methods());
    let (_, a) = run_pipeline(&s).unwrap();
    let (_, b) = run_pipeline(&s).unwrap();
    assert_eq!(a, b);
    // 2 budgets x 3 reps x (1 + 1 + 3 betas) x 3 deltas
    assert_eq!(a.rows.len(), 2 * 3 * 5 * 3);
    assert_eq!(a.summary.len(), 2 * 5 * 3);
    for r in &a.summary {
        assert_eq!(r.reps, 3);
    }
    let keys: Vec<_> = a.rows.iter().map(|r| (r.method, r.budget, r.delta_h.to_bits(), r.beta.to_bits(), r.rep)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn beta_zero_matches_no_guidance_bitwise() {
    let s = spec(all_methods());
    let scenario = Scenario::prepare(&s).unwrap();
    let res = run_experiment(&scenario, &s).unwrap();
    for &b in &s.budgets {
        for &d in &s.deltas {
            let active = res.find(Method::OptimizedActive, b, d, 0.0).unwrap();
            let passive = res.find(Method::OptimizedNoActive, b, d, 0.0).unwrap();
            assert_eq!(active.mean_phi_pct.to_bits(), passive.mean_phi_pct.to_bits());
        }
    }
    let sweep = beta_sweep(&scenario, &s).unwrap();
    assert_eq!(sweep.gains.len(), s.budgets.len() * s.deltas.len() * 2);
    let g = sweep.gain_between(8, 16.0, 0.0, 1.0).unwrap();
    let parts = sweep.gain_between(8, 16.0, 0.0, 0.5).unwrap() + sweep.gain_between(8, 16.0, 0.5, 1.0).unwrap();
    assert!((g - parts).abs() < 1e-9);
}

#[test]
fn dumped_cells_rescore_to_reported_values() {
    let s = spec(all_methods());
    let scenario = Scenario::prepare(&s).unwrap();
    let res = run_experiment(&scenario, &s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for cell in cells(&s).into_iter().step_by(4) {
        let path = dump_cell(&scenario, &s, cell, dir.path()).unwrap();
        let (meta, traj) =
            read_trajectories(&scenario.log, std::fs::File::open(&path).unwrap()).unwrap();
        let alloc_path = path.to_string_lossy().replace(".traj.json", ".alloc.json");
        let (_, n) = AllocationPlan::read_counts(std::fs::File::open(alloc_path).unwrap()).unwrap();
        let equipped: BTreeSet<BikeId> = meta.equipped.into_iter().collect();
        assert_eq!(equipped, scenario.fleet.equip(&n));
        for &d in &s.deltas {
            let grid = IntervalGrid::for_log(&scenario.log, d).unwrap();
            let phi = sensing_report(&traj, &equipped, &scenario.lengths, &grid).unwrap().phi_pct;
            let row = res
                .rows
                .iter()
                .find(|r| {
                    r.method == cell.method
                        && r.budget == cell.budget
                        && r.beta == cell.beta
                        && r.rep == cell.rep
                        && r.delta_h == d
                })
                .unwrap();
            assert_eq!(phi.to_bits(), row.phi_pct.to_bits());
        }
    }
}

#[test]
fn requirement_search() {
    let s = spec(vec![Method::OptimizedActive]);
    let scenario = Scenario::prepare(&s).unwrap();
    let zero = sensor_requirement(&scenario, &s, 0.0).unwrap();
    assert!(zero.iter().all(|r| r.budget == Some(0) && r.probes.is_empty()));

    let req = sensor_requirement(&scenario, &s, 20.0).unwrap();
    assert_eq!(req.len(), 3);
    for r in &req {
        if let Some(b) = r.budget {
            // the found budget reaches the target and one fewer does not
            assert!(r.phi_at_budget.unwrap() >= 20.0);
            if let Some(&(_, below)) = r.probes.iter().find(|p| p.0 + 1 == b) {
                assert!(below < 20.0);
            }
        }
    }
    // finer intervals need at least as many sensors
    let budgets: Vec<u32> = req.iter().map(|r| r.budget.unwrap_or(u32::MAX)).collect();
    assert!(budgets[0] <= budgets[1] && budgets[1] <= budgets[2], "{budgets:?}");

    // a 10x10 grid has segments no stand-to-stand route uses
    let all = sensor_requirement(&scenario, &s, 100.0).unwrap();
    assert!(all.iter().all(|r| r.budget.is_none()));
}

#[test]
fn spec_errors_carry_exit_codes() {
    let mut s = spec(all_methods());
    s.betas = vec![1.5];
    assert_eq!(run_pipeline(&s).unwrap_err().exit_code(), 3);
    let mut s = spec(all_methods());
    s.source = DataSource::Files {
        nodes: "/nonexistent/nodes.csv".into(),
        edges: "/nonexistent/edges.csv".into(),
        trips: "/nonexistent/trips.csv".into(),
    };
    assert_eq!(run_pipeline(&s).unwrap_err().exit_code(), 2);
}
