//! Primal side of the search: relaxed-indicator recovery, rounding to a
//! feasible support, box-constrained re-optimization on fixed supports, and the
//! branching rule.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::node::{Fixing, NodeState};
use crate::problem::ProblemInstance;
use crate::prox::FEAS_TOL;

/// Relaxed indicators recovered from relaxed coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredIndicators {
    /// Length `p`; 0 on `J0`, 1 on `J1`.
    pub z: Vec<f64>,
    /// Threshold separating capped (`z = 1`) and proportional coordinates.
    /// `M` when the budget does not bind, 0 when `kbar = 0`.
    pub tau: f64,
    /// Number of free coordinates with `z = 1` in the binding case.
    pub cap_count: usize,
    /// Free indices sorted by decreasing magnitude (ties by index).
    pub order: Vec<usize>,
}

fn free_order(beta: &[f64], fixing: &[Fixing]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..beta.len()).filter(|&j| fixing[j] == Fixing::Free).collect();
    order.sort_by(|&i, &j| beta[j].abs().total_cmp(&beta[i].abs()).then(i.cmp(&j)));
    order
}

pub(crate) fn recover_on(beta: &[f64], fixing: &[Fixing], kbar: usize, big_m: f64) -> Result<RecoveredIndicators> {
    let p = beta.len();
    let mut z = vec![0.0; p];
    for j in 0..p {
        if fixing[j] == Fixing::One {
            z[j] = 1.0;
        }
    }
    let order = free_order(beta, fixing);
    if kbar == 0 {
        return Ok(RecoveredIndicators { z, tau: 0.0, cap_count: 0, order });
    }
    let a: Vec<f64> = order.iter().map(|&j| beta[j].abs()).collect();
    let nonzero = a.iter().take_while(|&&v| v > 0.0).count();
    if nonzero <= kbar {
        for &j in &order[..nonzero] {
            z[j] = 1.0;
        }
        return Ok(RecoveredIndicators { z, tau: big_m, cap_count: nonzero, order });
    }
    // Binding budget: smallest s in 0..kbar with tau_s >= a_{s+1}, where
    // tau_s = (sum of a past rank s) / (kbar - s). Minimality also gives
    // a_s >= tau_s, so the sandwich holds.
    let mut suffix = vec![0.0; a.len() + 1];
    for r in (0..a.len()).rev() {
        suffix[r] = suffix[r + 1] + a[r];
    }
    // In floating point the upper half of the sandwich is checked explicitly;
    // the first s passing the lower half is the fallback.
    let mut chosen = None;
    let mut fallback = None;
    for s in 0..kbar {
        let tau = suffix[s] / (kbar - s) as f64;
        if tau >= a[s] {
            if s == 0 || a[s - 1] >= tau {
                chosen = Some((s, tau));
                break;
            }
            fallback.get_or_insert((s, tau));
        }
    }
    let chosen = chosen.or(fallback);
    let (s, tau) = chosen.ok_or_else(|| Error::Infeasible("no threshold satisfies the budget equation".into()))?;
    if tau > big_m * (1.0 + FEAS_TOL) {
        return Err(Error::Infeasible(format!(
            "coefficients exceed the node budget (threshold {tau} > M = {big_m})"
        )));
    }
    for (r, &j) in order.iter().enumerate() {
        z[j] = if r < s { 1.0 } else { (a[r] / tau).min(1.0) };
    }
    Ok(RecoveredIndicators { z, tau, cap_count: s, order })
}

/// Recovers the minimizing relaxed indicators for `beta` at `node`.
pub fn recover_indicators(beta: &[f64], node: &NodeState, k: usize, big_m: f64) -> Result<RecoveredIndicators> {
    recover_on(beta, node.fixings(), node.reduced_budget(k), big_m)
}

/// `J1` plus the `kbar` largest free magnitudes (ties by smallest index).
/// Returned sorted.
pub fn round_support(beta: &[f64], node: &NodeState, k: usize) -> Vec<usize> {
    let kbar = node.reduced_budget(k);
    let order = free_order(beta, node.fixings());
    let mut support: Vec<usize> = node.fixed_one().to_vec();
    support.extend(order.into_iter().take(kbar));
    support.sort_unstable();
    support
}

/// Free index with the largest `|beta_j|`, ties by smallest index.
pub fn select_branch_variable(beta: &[f64], node: &NodeState) -> Result<usize> {
    let mut best: Option<usize> = None;
    for j in 0..beta.len() {
        if node.fixing(j) != Fixing::Free {
            continue;
        }
        match best {
            Some(b) if beta[j].abs() <= beta[b].abs() => {}
            _ => best = Some(j),
        }
    }
    best.ok_or_else(|| Error::logic("cannot branch on a node with no free variables"))
}

/// Restricted fit on one support.
#[derive(Debug, Clone, PartialEq)]
pub struct ReoptResult {
    /// Sorted support.
    pub support: Vec<usize>,
    /// Coefficients aligned with `support`.
    pub coefficients: Vec<f64>,
    /// Full objective at the dense embedding of `coefficients`.
    pub objective: f64,
    pub iterations: usize,
}

impl ReoptResult {
    pub fn dense(&self, p: usize) -> Vec<f64> {
        let mut beta = vec![0.0; p];
        for (&j, &c) in self.support.iter().zip(&self.coefficients) {
            beta[j] = c;
        }
        beta
    }
}

const REOPT_GRAD_TOL: f64 = 1e-8;
const REOPT_MAX_ITER: usize = 5000;

/// Solves `min F(X_S b) + lambda2 ||b||^2` s.t. `|b| <= M` on each support.
///
/// Accelerated projected gradient with a per-support stepsize from a
/// Gershgorin bound on `X_S' X_S` and gradient-based momentum restart. Stops
/// when the gradient mapping norm drops to `1e-8` or after 5000 iterations.
pub fn reoptimize_supports(supports: &[Vec<usize>], instance: &ProblemInstance) -> Vec<ReoptResult> {
    supports.par_iter().map(|s| reoptimize_one(s, instance)).collect()
}

fn reoptimize_one(support: &[usize], instance: &ProblemInstance) -> ReoptResult {
    let mut support = support.to_vec();
    support.sort_unstable();
    support.dedup();
    let n = instance.n();
    let s = support.len();
    let y = instance.y();
    let loss = instance.loss();
    let lambda2 = instance.lambda2();
    let big_m = instance.big_m();
    if s == 0 {
        let objective = instance.objective(&vec![0.0; instance.p()]);
        return ReoptResult { support, coefficients: Vec::new(), objective, iterations: 0 };
    }
    // gather: xs is n x s row-major
    let xt = instance.xt();
    let mut xs = vec![0.0; n * s];
    for (r, &j) in support.iter().enumerate() {
        let col = xt.row(j);
        for i in 0..n {
            xs[i * s + r] = col[i];
        }
    }
    let mut gram = vec![0.0; s * s];
    for i in 0..n {
        let row = &xs[i * s..(i + 1) * s];
        for a in 0..s {
            for b in 0..s {
                gram[a * s + b] += row[a] * row[b];
            }
        }
    }
    let gersh = (0..s).map(|a| gram[a * s..(a + 1) * s].iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let trace: f64 = (0..s).map(|a| gram[a * s + a]).sum();
    let lip = loss.curvature() * gersh.min(trace) * (1.0 + 1e-12) + 2.0 * lambda2;
    let step = 1.0 / lip;

    let mut pred = vec![0.0; n];
    let mut grad = vec![0.0; s];
    let gradient = |b: &[f64], pred: &mut [f64], grad: &mut [f64]| {
        for i in 0..n {
            let row = &xs[i * s..(i + 1) * s];
            let mut acc = 0.0;
            for r in 0..s {
                acc += row[r] * b[r];
            }
            pred[i] = acc;
        }
        grad.iter_mut().zip(b).for_each(|(g, &bv)| *g = 2.0 * lambda2 * bv);
        for i in 0..n {
            let d = loss.derivative(pred[i], y[i]);
            let row = &xs[i * s..(i + 1) * s];
            for r in 0..s {
                grad[r] += row[r] * d;
            }
        }
    };

    let mut beta = vec![0.0; s];
    let mut prev = vec![0.0; s];
    let mut point = vec![0.0; s];
    let mut t = 1.0f64;
    let mut iterations = 0;
    while iterations < REOPT_MAX_ITER {
        iterations += 1;
        gradient(&point, &mut pred, &mut grad);
        prev.copy_from_slice(&beta);
        let mut restart = 0.0;
        for r in 0..s {
            beta[r] = (point[r] - step * grad[r]).clamp(-big_m, big_m);
            restart += (point[r] - beta[r]) * (beta[r] - prev[r]);
        }
        // restart when the momentum direction opposes the gradient step
        if restart > 0.0 {
            t = 1.0;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        for r in 0..s {
            point[r] = beta[r] + mom * (beta[r] - prev[r]);
        }
        t = t_next;
        if iterations % 10 == 0 || iterations == REOPT_MAX_ITER {
            gradient(&beta, &mut pred, &mut grad);
            let mut norm = 0.0;
            for r in 0..s {
                let g = (beta[r] - (beta[r] - step * grad[r]).clamp(-big_m, big_m)) * lip;
                norm += g * g;
            }
            if norm.sqrt() <= REOPT_GRAD_TOL {
                break;
            }
        }
    }
    let mut dense = vec![0.0; instance.p()];
    for (&j, &c) in support.iter().zip(&beta) {
        dense[j] = c;
    }
    let objective = instance.objective(&dense);
    ReoptResult { support, coefficients: beta, objective, iterations }
}
