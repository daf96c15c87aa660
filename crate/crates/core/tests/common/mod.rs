#![allow(dead_code)]

use velosense::allocation::{MilpInstance, THRESHOLD_EPS};
use velosense::network::{SegmentId, RoadNetwork};
use velosense::synth::{generate, SynthConfig};
use velosense::trips::{clean_trips, CleanParams, StandId, TripLog};

pub fn small_config(seed: u64, grid: usize, stands: usize, trips: usize) -> SynthConfig {
    SynthConfig {
        grid_w: grid,
        grid_h: grid,
        block_m: 200.0,
        stand_count: stands,
        trips,
        horizon: (360, 1320),
        gravity_gamma: 1.5,
        seed,
        hour_weights: None,
    }
}

pub fn city(cfg: &SynthConfig) -> (RoadNetwork, TripLog) {
    let c = generate(cfg).expect("synthetic city");
    let (log, report) = clean_trips(&c.trips, &c.network, &CleanParams::default()).expect("clean");
    assert_eq!(report.kept, cfg.trips);
    (c.network, log)
}

pub fn small_city(seed: u64, grid: usize, stands: usize, trips: usize) -> (RoadNetwork, TripLog) {
    city(&small_config(seed, grid, stands, trips))
}

/// Dense `p[s][e]` view of a sparse instance, with zero-column segments
/// reinstated.
pub fn dense_p(inst: &MilpInstance) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; inst.lengths.len()]; inst.caps.len()];
    for (e, col) in inst.candidates.iter().zip(&inst.columns) {
        for &(s, v) in col {
            p[s.0][e.0] = v;
        }
    }
    p
}

/// Objective of `n` computed from scratch: `Σ_e l_e [Σ_s p n >= K - eps]`.
pub fn oracle_objective(p: &[Vec<f64>], lengths: &[f64], k: f64, n: &[u32]) -> f64 {
    (0..lengths.len())
        .filter(|&e| {
            let cov: f64 = (0..n.len()).map(|s| p[s][e] * n[s] as f64).sum();
            cov >= k - THRESHOLD_EPS
        })
        .map(|e| lengths[e])
        .sum()
}

/// Best objective over every `n` with `0 <= n_s <= b_s`, `Σ n <= budget`.
pub fn brute_force(p: &[Vec<f64>], lengths: &[f64], caps: &[u32], budget: u32, k: f64) -> f64 {
    fn rec(
        s: usize,
        left: u32,
        n: &mut Vec<u32>,
        p: &[Vec<f64>],
        lengths: &[f64],
        caps: &[u32],
        k: f64,
        best: &mut f64,
    ) {
        if s == caps.len() {
            *best = best.max(oracle_objective(p, lengths, k, n));
            return;
        }
        for x in 0..=caps[s].min(left) {
            n[s] = x;
            rec(s + 1, left - x, n, p, lengths, caps, k, best);
        }
        n[s] = 0;
    }
    let mut best = 0.0;
    let mut n = vec![0; caps.len()];
    rec(0, budget, &mut n, p, lengths, caps, k, &mut best);
    best
}

/// Random sparse instance: `stands ≤ 6`, `b ≤ 3`, integer lengths, `p` on a
/// 0.05 grid with roughly 40% density.
pub fn random_instance(rng: &mut impl rand::Rng, max_budget: u32) -> MilpInstance {
    let stands = rng.gen_range(1..=6);
    let segments = rng.gen_range(1..=8);
    let caps: Vec<u32> = (0..stands).map(|_| rng.gen_range(0..=3)).collect();
    let lengths: Vec<f64> = (0..segments).map(|_| rng.gen_range(10..=500) as f64).collect();
    let mut entries = Vec::new();
    for s in 0..stands {
        for e in 0..segments {
            if rng.gen_bool(0.4) {
                let p = rng.gen_range(1..=30) as f64 * 0.05;
                entries.push((StandId(s), SegmentId(e), p));
            }
        }
    }
    let budget = rng.gen_range(1..=max_budget);
    MilpInstance::from_entries(entries, lengths, caps, budget, 1.0).expect("instance")
}
