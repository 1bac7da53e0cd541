//! Exact solvers on a sampled MDP: Q-value iteration, policy evaluation,
//! finite-horizon backups and greedy policies.
//!
//! All solvers start from `Q = 0`, so the `n`-th iterate is the `n`-step
//! finite-horizon Q-table.

use serde::{Deserialize, Serialize};

use crate::error::{DmfpError, Result};
use crate::parallel;
use crate::types::{Policy, QTable, SampledMdp};

/// Dot product with four independent accumulators. The summation order is
/// fixed, so results do not depend on how rows are distributed over threads.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in chunks_a.zip(chunks_b) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_shapes(q: &QTable, mdp: &SampledMdp) -> Result<()> {
    if q.num_states != mdp.num_states || q.num_actions != mdp.num_actions {
        return Err(DmfpError::ShapeMismatch(format!(
            "Q-table {}x{} vs MDP {}x{}",
            q.num_states, q.num_actions, mdp.num_states, mdp.num_actions
        )));
    }
    Ok(())
}

/// `Q'(s,a) = r(s,a) + beta * P(.|s,a) . next_values` into `out`.
fn backup_into(mdp: &SampledMdp, next_values: &[f64], out: &mut QTable) {
    let na = mdp.num_actions;
    let beta = mdp.discount;
    parallel::for_each_chunk(&mut out.values, na, |s, row| {
        for (a, q) in row.iter_mut().enumerate() {
            *q = mdp.reward(s, a) + beta * dot(mdp.row(s, a), next_values);
        }
    });
}

/// Transition probabilities below this are skipped by the iterative solvers.
/// A row loses at most `N * PRUNE_BELOW` of its mass, far below the rounding
/// error of the dense dot product it replaces.
pub const PRUNE_BELOW: f64 = 1e-18;

/// Compressed rows of the transition tensor, used when most entries are
/// negligible (small Dirichlet concentrations).
struct SparseKernel {
    offsets: Vec<usize>,
    index: Vec<u32>,
    prob: Vec<f64>,
}

impl SparseKernel {
    /// `None` if more than a quarter of the entries survive pruning.
    fn build(mdp: &SampledMdp) -> Option<Self> {
        let n = mdp.num_states;
        let kept = mdp
            .transitions
            .iter()
            .filter(|&&p| p >= PRUNE_BELOW)
            .count();
        if n < 16 || kept * 4 > mdp.transitions.len() || n > u32::MAX as usize {
            return None;
        }
        let mut offsets = Vec::with_capacity(mdp.transitions.len() / n + 1);
        let mut index = Vec::with_capacity(kept);
        let mut prob = Vec::with_capacity(kept);
        offsets.push(0);
        for row in mdp.transitions.chunks_exact(n) {
            for (j, &p) in row.iter().enumerate() {
                if p >= PRUNE_BELOW {
                    index.push(j as u32);
                    prob.push(p);
                }
            }
            offsets.push(index.len());
        }
        Some(SparseKernel {
            offsets,
            index,
            prob,
        })
    }

    fn backup_into(&self, mdp: &SampledMdp, next_values: &[f64], out: &mut QTable) {
        let na = mdp.num_actions;
        let beta = mdp.discount;
        parallel::for_each_chunk(&mut out.values, na, |s, row| {
            for (a, q) in row.iter_mut().enumerate() {
                let sa = s * na + a;
                let (lo, hi) = (self.offsets[sa], self.offsets[sa + 1]);
                let ev: f64 = self.index[lo..hi]
                    .iter()
                    .zip(&self.prob[lo..hi])
                    .map(|(&j, &p)| p * next_values[j as usize])
                    .sum();
                *q = mdp.reward(s, a) + beta * ev;
            }
        });
    }
}

fn policy_values(q: &QTable, pi: &Policy) -> Vec<f64> {
    pi.action
        .iter()
        .enumerate()
        .map(|(s, &a)| q.get(s, a))
        .collect()
}

fn check_policy(pi: &Policy, mdp: &SampledMdp) -> Result<()> {
    if pi.num_states() != mdp.num_states || pi.num_actions != mdp.num_actions {
        return Err(DmfpError::ShapeMismatch(format!(
            "policy over {} states / {} actions vs MDP {}x{}",
            pi.num_states(),
            pi.num_actions,
            mdp.num_states,
            mdp.num_actions
        )));
    }
    Ok(())
}

/// One application of the Bellman optimality operator.
pub fn backup_step(q: &QTable, mdp: &SampledMdp) -> Result<QTable> {
    check_shapes(q, mdp)?;
    let v = q.state_values();
    let mut out = QTable::zeros(mdp.num_states, mdp.num_actions);
    backup_into(mdp, &v, &mut out);
    Ok(out)
}

/// One application of the policy-evaluation operator for `pi`.
pub fn policy_backup_step(q: &QTable, mdp: &SampledMdp, pi: &Policy) -> Result<QTable> {
    check_shapes(q, mdp)?;
    check_policy(pi, mdp)?;
    let v = policy_values(q, pi);
    let mut out = QTable::zeros(mdp.num_states, mdp.num_actions);
    backup_into(mdp, &v, &mut out);
    Ok(out)
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub q: QTable,
    /// Number of backups applied.
    pub iterations: usize,
    /// Last sup-norm change `||Q^n - Q^(n-1)||`. Bounds the Bellman residual
    /// of `q` from above.
    pub residual: f64,
    pub converged: bool,
    /// Sup-norm change after every backup.
    pub diffs: Vec<f64>,
}

/// Stopping threshold on successive iterates that guarantees
/// `||Q - Q*|| <= eps` for a `discount`-contraction.
pub fn stopping_threshold(eps: f64, discount: f64) -> f64 {
    if discount == 0.0 {
        f64::INFINITY
    } else {
        eps * (1.0 - discount) / (2.0 * discount)
    }
}

/// Which operator an iterative solve applies.
#[derive(Clone, Copy)]
enum Operator<'a> {
    Optimal,
    Policy(&'a Policy),
}

fn iterate<F: FnMut(usize, &QTable)>(
    mdp: &SampledMdp,
    op: Operator<'_>,
    eps: f64,
    max_iters: usize,
    mut observe: F,
) -> Result<SolveReport> {
    if !(eps > 0.0) {
        return Err(DmfpError::InvalidArgument(format!(
            "eps must be > 0, got {eps}"
        )));
    }
    if !(mdp.discount < 1.0) {
        return Err(DmfpError::InvalidArgument("discount must be < 1".into()));
    }
    let threshold = stopping_threshold(eps, mdp.discount);
    let mut q = QTable::zeros(mdp.num_states, mdp.num_actions);
    let mut next = q.clone();
    let mut diffs = Vec::new();
    let mut converged = false;
    let sparse = SparseKernel::build(mdp);
    for n in 1..=max_iters {
        let v = match op {
            Operator::Optimal => q.state_values(),
            Operator::Policy(pi) => policy_values(&q, pi),
        };
        match &sparse {
            Some(kernel) => kernel.backup_into(mdp, &v, &mut next),
            None => backup_into(mdp, &v, &mut next),
        }
        let diff = next.sup_distance(&q);
        std::mem::swap(&mut q, &mut next);
        diffs.push(diff);
        observe(n, &q);
        if diff <= threshold {
            converged = true;
            break;
        }
    }
    Ok(SolveReport {
        residual: diffs.last().copied().unwrap_or(f64::INFINITY),
        iterations: diffs.len(),
        q,
        converged,
        diffs,
    })
}

/// Q-value iteration from `Q = 0` until the contraction bound guarantees
/// `||Q - Q*|| <= eps`, or `max_iters` backups. Non-convergence is reported
/// through [`SolveReport::converged`].
pub fn solve_q(mdp: &SampledMdp, eps: f64, max_iters: usize) -> Result<SolveReport> {
    iterate(mdp, Operator::Optimal, eps, max_iters, |_, _| {})
}

/// [`solve_q`] calling `observe(n, &Q^n)` after every backup.
pub fn solve_q_observed<F: FnMut(usize, &QTable)>(
    mdp: &SampledMdp,
    eps: f64,
    max_iters: usize,
    observe: F,
) -> Result<SolveReport> {
    iterate(mdp, Operator::Optimal, eps, max_iters, observe)
}

/// Policy evaluation: iterates the fixed-policy operator from `Q = 0`.
pub fn solve_policy_q(
    mdp: &SampledMdp,
    pi: &Policy,
    eps: f64,
    max_iters: usize,
) -> Result<SolveReport> {
    check_policy(pi, mdp)?;
    iterate(mdp, Operator::Policy(pi), eps, max_iters, |_, _| {})
}

pub fn solve_policy_q_observed<F: FnMut(usize, &QTable)>(
    mdp: &SampledMdp,
    pi: &Policy,
    eps: f64,
    max_iters: usize,
    observe: F,
) -> Result<SolveReport> {
    check_policy(pi, mdp)?;
    iterate(mdp, Operator::Policy(pi), eps, max_iters, observe)
}

/// `[Q^1, ..., Q^H]` from `Q^0 = 0`.
pub fn finite_horizon(mdp: &SampledMdp, horizon: usize) -> Result<Vec<QTable>> {
    if horizon == 0 {
        return Err(DmfpError::InvalidArgument("horizon must be >= 1".into()));
    }
    let mut out: Vec<QTable> = Vec::with_capacity(horizon);
    let mut q = QTable::zeros(mdp.num_states, mdp.num_actions);
    for _ in 0..horizon {
        q = backup_step(&q, mdp)?;
        out.push(q.clone());
    }
    Ok(out)
}

/// `argmax_a Q(s, a)` per state; ties go to the lowest action index.
pub fn greedy_policy(q: &QTable) -> Policy {
    let action = q
        .values
        .chunks_exact(q.num_actions)
        .map(|row| {
            let mut best = 0;
            for (a, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect();
    Policy {
        num_actions: q.num_actions,
        action,
    }
}
