//! Independent reference computations shared by the integration tests.
//!
//! Nothing here calls into the solver's numerical kernels; only data types,
//! node branching and instance accessors are borrowed from the library.

#![allow(dead_code)]

use std::collections::HashMap;

use glmcert::node::{Fixing, NodeState};
use glmcert::problem::Constraints;
use glmcert::{branch, generate_synthetic, preprocess, root_node, LossKind, ProblemInstance, SyntheticSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn oracle_instance(loss: LossKind, seed: u64) -> ProblemInstance {
    let raw = generate_synthetic(&SyntheticSpec::new(30, 12, 3, 0.9, loss, seed)).unwrap();
    preprocess(&raw).with_constraints(Constraints { k: 3, big_m: 2.0, lambda2: 1.0 }).unwrap()
}

pub fn loss(kind: LossKind, s: f64, y: f64) -> f64 {
    match kind {
        LossKind::Squared => 0.5 * (s - y) * (s - y),
        LossKind::Logistic => {
            let t = -y * s;
            if t > 0.0 {
                t + (-t).exp().ln_1p()
            } else {
                t.exp().ln_1p()
            }
        }
    }
}

fn dloss(kind: LossKind, s: f64, y: f64) -> f64 {
    match kind {
        LossKind::Squared => s - y,
        LossKind::Logistic => {
            let t = y * s;
            // -y / (1 + e^{t})
            if t >= 0.0 {
                let e = (-t).exp();
                -y * e / (1.0 + e)
            } else {
                -y / (1.0 + t.exp())
            }
        }
    }
}

fn d2loss(kind: LossKind, s: f64, y: f64) -> f64 {
    match kind {
        LossKind::Squared => 1.0,
        LossKind::Logistic => {
            let t = (y * s).abs();
            let e = (-t).exp();
            e / ((1.0 + e) * (1.0 + e))
        }
    }
}

pub fn objective(inst: &ProblemInstance, beta: &[f64]) -> f64 {
    let x = inst.x();
    let mut total = 0.0;
    for i in 0..inst.n() {
        let s: f64 = x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum();
        total += loss(inst.loss(), s, inst.y()[i]);
    }
    total + inst.lambda2() * beta.iter().map(|b| b * b).sum::<f64>()
}

/// Restricted optimum on `support` by cyclic coordinate descent, each
/// coordinate minimized exactly (safeguarded Newton inside `[-M, M]`).
pub fn restricted_fit(inst: &ProblemInstance, support: &[usize]) -> (Vec<f64>, f64) {
    let n = inst.n();
    let p = inst.p();
    let kind = inst.loss();
    let y = inst.y();
    let m = inst.big_m();
    let l2 = inst.lambda2();
    let cols: Vec<Vec<f64>> = support.iter().map(|&j| (0..n).map(|i| inst.x()[(i, j)]).collect()).collect();
    let mut b = vec![0.0; support.len()];
    let mut eta = vec![0.0; n];
    for _sweep in 0..100_000 {
        let mut change: f64 = 0.0;
        for (r, col) in cols.iter().enumerate() {
            let old = b[r];
            let deriv = |v: f64, eta: &[f64]| -> (f64, f64) {
                let mut g = 2.0 * l2 * v;
                let mut h = 2.0 * l2;
                for i in 0..n {
                    let s = eta[i] + col[i] * (v - old);
                    g += col[i] * dloss(kind, s, y[i]);
                    h += col[i] * col[i] * d2loss(kind, s, y[i]);
                }
                (g, h)
            };
            // bracket the root of the increasing derivative within [-M, M]
            let (glo, _) = deriv(-m, &eta);
            let (ghi, _) = deriv(m, &eta);
            let new = if glo >= 0.0 {
                -m
            } else if ghi <= 0.0 {
                m
            } else {
                let (mut lo, mut hi) = (-m, m);
                let mut v = old.clamp(lo, hi);
                for _ in 0..200 {
                    let (g, h) = deriv(v, &eta);
                    if g > 0.0 {
                        hi = v;
                    } else {
                        lo = v;
                    }
                    let mut next = v - g / h;
                    if !(next > lo && next < hi) {
                        next = 0.5 * (lo + hi);
                    }
                    if (next - v).abs() <= 1e-16 * v.abs().max(1.0) || hi - lo <= 1e-15 {
                        v = next;
                        break;
                    }
                    v = next;
                }
                v
            };
            if new != old {
                for i in 0..n {
                    eta[i] += col[i] * (new - old);
                }
                b[r] = new;
            }
            change = change.max((new - old).abs());
        }
        if change <= 1e-13 {
            break;
        }
    }
    let mut dense = vec![0.0; p];
    for (&j, &v) in support.iter().zip(&b) {
        dense[j] = v;
    }
    let obj = objective(inst, &dense);
    (dense, obj)
}

/// `v(S)` for every support of size at most `k`, with bitmasks.
pub struct Enumeration {
    pub supports: Vec<(u64, Vec<usize>, f64)>,
    pub optimum: f64,
    cache: HashMap<(u64, u64), f64>,
}

fn subsets(p: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..k {
        let mut next = Vec::new();
        for s in &frontier {
            let start = s.last().map_or(0, |&l: &usize| l + 1);
            for j in start..p {
                let mut t: Vec<usize> = s.clone();
                t.push(j);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

impl Enumeration {
    pub fn new(inst: &ProblemInstance) -> Self {
        let supports: Vec<(u64, Vec<usize>, f64)> = subsets(inst.p(), inst.k())
            .into_iter()
            .map(|s| {
                let mask = s.iter().fold(0u64, |m, &j| m | (1 << j));
                let (_, v) = restricted_fit(inst, &s);
                (mask, s, v)
            })
            .collect();
        let optimum = supports.iter().map(|t| t.2).fold(f64::INFINITY, f64::min);
        Enumeration { supports, optimum, cache: HashMap::new() }
    }

    /// Optimum over the node's region: supports avoiding `J0` that use at most
    /// `k - |J1|` free indices.
    pub fn node_optimum(&mut self, fixed_zero: &[usize], fixed_one: &[usize], k: usize) -> f64 {
        let z = fixed_zero.iter().fold(0u64, |m, &j| m | (1 << j));
        let o = fixed_one.iter().fold(0u64, |m, &j| m | (1 << j));
        if let Some(&v) = self.cache.get(&(z, o)) {
            return v;
        }
        let kbar = k - fixed_one.len();
        let v = self
            .supports
            .iter()
            .filter(|(mask, _, _)| mask & z == 0 && (mask & !o).count_ones() as usize <= kbar)
            .map(|t| t.2)
            .fold(f64::INFINITY, f64::min);
        self.cache.insert((z, o), v);
        v
    }

    pub fn rashomon_set(&self, epsilon: f64) -> Vec<(Vec<usize>, f64)> {
        let limit = (1.0 + epsilon) * self.optimum;
        self.supports.iter().filter(|t| t.2 <= limit).map(|t| (t.1.clone(), t.2)).collect()
    }
}

/// `g_N(beta)` by bisection on the budget equation
/// `sum_free min(1, |beta_j| / tau) = kbar`; `None` when infeasible.
pub fn g_by_bisection(beta: &[f64], fixing: &[Fixing], kbar: usize, m: f64) -> Option<(f64, Vec<f64>)> {
    let p = beta.len();
    let mut z = vec![0.0; p];
    let mut total = 0.0;
    let mut free = Vec::new();
    for j in 0..p {
        if beta[j].abs() > m * (1.0 + 1e-12) {
            return None;
        }
        match fixing[j] {
            Fixing::Zero if beta[j] != 0.0 => return None,
            Fixing::Zero => {}
            Fixing::One => {
                z[j] = 1.0;
                total += 0.5 * beta[j] * beta[j];
            }
            Fixing::Free => free.push(j),
        }
    }
    let nonzero: Vec<usize> = free.iter().copied().filter(|&j| beta[j] != 0.0).collect();
    if nonzero.len() <= kbar {
        for &j in &nonzero {
            z[j] = 1.0;
            total += 0.5 * beta[j] * beta[j];
        }
        return Some((total, z));
    }
    let count = |tau: f64| nonzero.iter().map(|&j| (beta[j].abs() / tau).min(1.0)).sum::<f64>();
    if count(m) > kbar as f64 * (1.0 + 1e-12) + 1e-12 {
        return None;
    }
    let (mut lo, mut hi) = (0.0, m);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if count(mid) > kbar as f64 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = hi;
    for &j in &nonzero {
        z[j] = (beta[j].abs() / tau).min(1.0);
        total += 0.5 * beta[j] * beta[j] / z[j];
    }
    Some((total, z))
}

pub fn huber(q: f64, m: f64) -> f64 {
    if q.abs() <= m {
        0.5 * q * q
    } else {
        m * q.abs() - 0.5 * m * m
    }
}

fn golden(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..300 {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// `argmin_a 0.5 ||a - w||^2 + weight * g*(a)` through
/// `TopSum_k(h) = min_t k t + sum_i max(h_i - t, 0)`: an outer convex search
/// over `t`, inner separable one-dimensional convex searches.
pub fn conjugate_prox_oracle(w: &[f64], fixing: &[Fixing], kbar: usize, weight: f64, m: f64) -> Vec<f64> {
    let p = w.len();
    let inner = |t: f64, j: usize| -> f64 {
        let wj = w[j];
        let (lo, hi) = if wj >= 0.0 { (0.0, wj) } else { (wj, 0.0) };
        golden(lo, hi, |a| 0.5 * (a - wj) * (a - wj) + weight * (huber(a, m) - t).max(0.0))
    };
    let free: Vec<usize> = (0..p).filter(|&j| fixing[j] == Fixing::Free).collect();
    let value = |t: f64| -> f64 {
        let mut v = weight * kbar as f64 * t;
        for &j in &free {
            let a = inner(t, j);
            v += 0.5 * (a - w[j]) * (a - w[j]) + weight * (huber(a, m) - t).max(0.0);
        }
        v
    };
    let tmax = free.iter().map(|&j| huber(w[j], m)).fold(0.0, f64::max);
    let t = if kbar == 0 {
        tmax
    } else if kbar >= free.len() {
        0.0
    } else {
        golden(0.0, tmax, value)
    };
    (0..p)
        .map(|j| match fixing[j] {
            Fixing::Zero => w[j],
            Fixing::One => golden(w[j].min(0.0), w[j].max(0.0), |a| 0.5 * (a - w[j]) * (a - w[j]) + weight * huber(a, m)),
            Fixing::Free => inner(t, j),
        })
        .collect()
}

/// Brute-force Mann-Whitney AUC by pair counting.
pub fn pairwise_auc(scores: &[f64], y: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if y[i] > 0.0 && y[j] < 0.0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

/// A node reached by a random sequence of branchings from the root.
pub fn random_node(rng: &mut ChaCha8Rng, p: usize, k: usize) -> NodeState {
    let mut node = root_node(p);
    let steps = rng.gen_range(0..=p);
    for _ in 0..steps {
        let free = node.free();
        if free.is_empty() || node.fixed_one().len() >= k {
            break;
        }
        let j = free[rng.gen_range(0..free.len())];
        let (zero, one) = branch(&node, j, &vec![0.0; p], k, 1.0).unwrap();
        node = if rng.gen_bool(0.5) { zero } else { one };
    }
    node
}

/// Random coefficients feasible for `node`'s relaxation domain.
pub fn random_feasible_beta(rng: &mut ChaCha8Rng, node: &NodeState, k: usize, m: f64) -> Vec<f64> {
    let p = node.p();
    let density = rng.gen_range(0.2..=1.0);
    let mut beta: Vec<f64> = (0..p)
        .map(|j| {
            if node.fixing(j) == Fixing::Zero || !rng.gen_bool(density) {
                0.0
            } else {
                rng.gen_range(-m..=m)
            }
        })
        .collect();
    let kbar = node.reduced_budget(k) as f64;
    let used: f64 = (0..p).filter(|&j| node.fixing(j) == Fixing::Free).map(|j| beta[j].abs() / m).sum();
    if used > kbar {
        let scale = kbar / used * rng.gen_range(0.5..=1.0);
        for (j, b) in beta.iter_mut().enumerate() {
            if node.fixing(j) == Fixing::Free {
                *b *= scale;
            }
        }
    }
    beta
}
