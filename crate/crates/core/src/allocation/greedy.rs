use super::{AllocationPlan, MilpInstance, SolverTag};
use crate::error::Result;

/// One sensor at a time to the stand with the largest newly satisfied
/// length; ties go to the larger threshold progress `Σ l·min(p, K - N_e)`,
/// then the smaller stand id. Finishes with a pairwise-move local search.
pub fn solve_greedy(inst: &MilpInstance) -> Result<AllocationPlan> {
    let mut n = vec![0u32; inst.stand_count()];
    let mut cov = vec![0.0; inst.candidates.len()];
    let cand_len: Vec<f64> = inst.candidates.iter().map(|e| inst.lengths[e.0]).collect();

    for _ in 0..inst.budget {
        let mut best: Option<(usize, f64, f64)> = None;
        for s in 0..inst.stand_count() {
            if n[s] >= inst.caps[s] {
                continue;
            }
            let mut gain = 0.0;
            let mut progress = 0.0;
            for &(c, p) in &inst.rows[s] {
                if inst.satisfied(cov[c]) {
                    continue;
                }
                if inst.satisfied(cov[c] + p) {
                    gain += cand_len[c];
                }
                progress += cand_len[c] * p.min(inst.k - cov[c]);
            }
            let better = match best {
                None => true,
                Some((_, g, pr)) => gain > g || (gain == g && progress > pr),
            };
            if better {
                best = Some((s, gain, progress));
            }
        }
        let Some((s, _, _)) = best else { break };
        n[s] += 1;
        for &(c, p) in &inst.rows[s] {
            cov[c] += p;
        }
    }

    local_search(inst, &mut n);
    AllocationPlan::evaluate(inst, n, SolverTag::Greedy, None)
}

/// First-improvement search over single-sensor moves between stands.
/// Stops when no move raises the objective.
pub fn local_search(inst: &MilpInstance, n: &mut [u32]) {
    let cand_len: Vec<f64> = inst.candidates.iter().map(|e| inst.lengths[e.0]).collect();
    let mut cov = inst.candidate_coverage(n);
    let mut objective = inst.objective_of(n);
    let mut delta = vec![0.0; inst.candidates.len()];
    let mut seen = vec![false; inst.candidates.len()];
    let mut touched: Vec<usize> = Vec::new();

    'restart: loop {
        for from in 0..n.len() {
            if n[from] == 0 {
                continue;
            }
            for to in 0..n.len() {
                if to == from || n[to] >= inst.caps[to] || inst.rows[to].is_empty() {
                    continue;
                }
                for &(c, p) in &inst.rows[from] {
                    if !seen[c] {
                        seen[c] = true;
                        touched.push(c);
                    }
                    delta[c] -= p;
                }
                for &(c, p) in &inst.rows[to] {
                    if !seen[c] {
                        seen[c] = true;
                        touched.push(c);
                    }
                    delta[c] += p;
                }
                let mut change = 0.0;
                for &c in &touched {
                    let before = inst.satisfied(cov[c]);
                    let after = inst.satisfied(cov[c] + delta[c]);
                    if before != after {
                        change += if after { cand_len[c] } else { -cand_len[c] };
                    }
                }
                for &c in &touched {
                    delta[c] = 0.0;
                    seen[c] = false;
                }
                touched.clear();

                if change > 1e-9 * objective.abs().max(1.0) {
                    n[from] -= 1;
                    n[to] += 1;
                    cov = inst.candidate_coverage(n);
                    let next = inst.objective_of(n);
                    if next > objective {
                        objective = next;
                        continue 'restart;
                    }
                    // rounding disagreement; undo and keep scanning
                    n[from] += 1;
                    n[to] -= 1;
                    cov = inst.candidate_coverage(n);
                }
            }
        }
        break;
    }
}
