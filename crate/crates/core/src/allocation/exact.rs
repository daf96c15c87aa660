use std::time::{Duration, Instant};

use super::{solve_greedy, AllocationPlan, MilpInstance, SolverTag};
use crate::error::Result;

struct Search<'a> {
    inst: &'a MilpInstance,
    /// Stands in branching order.
    order: Vec<usize>,
    /// Per candidate: `(branch position, p)` sorted by `p` descending.
    columns: Vec<Vec<(usize, f64)>>,
    cand_len: Vec<f64>,
    best_obj: f64,
    best_n: Vec<u32>,
    n: Vec<u32>,
    deadline: Option<Instant>,
    nodes: u64,
    timed_out: bool,
}

impl Search<'_> {
    /// Satisfied length so far plus every unsatisfied candidate that the
    /// remaining budget could still lift to `K` on its own.
    fn bound(&self, cov: &[f64], depth: usize, remaining: u32) -> (f64, f64) {
        let mut sat = 0.0;
        let mut ub = 0.0;
        for (c, col) in self.columns.iter().enumerate() {
            let l = self.cand_len[c];
            if self.inst.satisfied(cov[c]) {
                sat += l;
                ub += l;
                continue;
            }
            let mut left = remaining;
            let mut reach = cov[c];
            for &(pos, p) in col {
                if left == 0 {
                    break;
                }
                if pos < depth {
                    continue;
                }
                let take = left.min(self.inst.caps[self.order[pos]]);
                reach += p * take as f64;
                left -= take;
            }
            if self.inst.satisfied(reach) {
                ub += l;
            }
        }
        (sat, ub)
    }

    fn improves(&self, value: f64) -> bool {
        value > self.best_obj + 1e-9 * self.best_obj.abs().max(1.0)
    }

    fn dfs(&mut self, cov: &mut Vec<f64>, depth: usize, remaining: u32) {
        self.nodes += 1;
        if self.nodes % 1024 == 0 {
            if let Some(d) = self.deadline {
                if Instant::now() >= d {
                    self.timed_out = true;
                }
            }
        }
        if self.timed_out {
            return;
        }
        let (sat, ub) = self.bound(cov, depth, remaining);
        if self.improves(sat) {
            self.best_obj = sat;
            self.best_n = self.n.clone();
        }
        if depth == self.order.len() || remaining == 0 || !self.improves(ub) {
            return;
        }
        let s = self.order[depth];
        let top = remaining.min(self.inst.caps[s]);
        let saved = cov.clone();
        for v in (0..=top).rev() {
            if v > 0 {
                for &(c, p) in &self.inst.rows[s] {
                    cov[c] = saved[c] + p * v as f64;
                }
            } else {
                cov.copy_from_slice(&saved);
            }
            self.n[s] = v;
            self.dfs(cov, depth + 1, remaining - v);
            if self.timed_out {
                break;
            }
        }
        self.n[s] = 0;
        cov.copy_from_slice(&saved);
    }
}

/// Depth-first branch and bound over integer allocations, seeded with the
/// greedy plan. Returns a proven optimum (`gap = Some(0.0)`) or, after
/// `time_limit_s`, the incumbent with the gap to the root bound.
pub fn solve_exact(inst: &MilpInstance, time_limit_s: f64) -> Result<AllocationPlan> {
    let start = Instant::now();
    let incumbent = solve_greedy(inst)?;

    let mut order: Vec<usize> = (0..inst.stand_count())
        .filter(|&s| inst.caps[s] > 0 && !inst.rows[s].is_empty())
        .collect();
    let potential = |s: usize| -> f64 {
        inst.rows[s]
            .iter()
            .map(|&(c, p)| inst.lengths[inst.candidates[c].0] * (p * inst.caps[s] as f64).min(inst.k))
            .sum()
    };
    order.sort_by(|&a, &b| potential(b).total_cmp(&potential(a)).then(a.cmp(&b)));
    let mut position = vec![usize::MAX; inst.stand_count()];
    for (i, &s) in order.iter().enumerate() {
        position[s] = i;
    }
    let columns = inst
        .columns
        .iter()
        .map(|col| {
            let mut v: Vec<(usize, f64)> = col
                .iter()
                .filter(|(s, _)| position[s.0] != usize::MAX)
                .map(|&(s, p)| (position[s.0], p))
                .collect();
            v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            v
        })
        .collect();
    let cand_len = inst.candidates.iter().map(|e| inst.lengths[e.0]).collect();

    let deadline = (time_limit_s.is_finite() && time_limit_s > 0.0)
        .then(|| start + Duration::from_secs_f64(time_limit_s));
    let mut search = Search {
        inst,
        order,
        columns,
        cand_len,
        best_obj: incumbent.objective_m,
        best_n: incumbent.n.clone(),
        n: vec![0; inst.stand_count()],
        deadline,
        nodes: 0,
        timed_out: false,
    };
    let mut cov = vec![0.0; inst.candidates.len()];
    let (_, root_ub) = search.bound(&cov, 0, inst.budget);
    search.dfs(&mut cov, 0, inst.budget);

    let gap = if search.timed_out {
        let best = search.best_obj;
        Some(if root_ub > 0.0 { ((root_ub - best) / root_ub).max(0.0) } else { 0.0 })
    } else {
        Some(0.0)
    };
    log::debug!(
        "exact allocation: {} nodes in {:?}, objective {}",
        search.nodes,
        start.elapsed(),
        search.best_obj
    );
    AllocationPlan::evaluate(inst, search.best_n, SolverTag::Exact, gap)
}
