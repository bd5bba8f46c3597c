//! Node-dependent proximal kernels.
//!
//! For a node with fixing sets `(J0, J1, Jf)` and reduced budget `kbar`, the
//! perspective penalty `g` has conjugate
//!
//! ```text
//! g*(q) = sum_{j in J1} H_M(q_j) + TopSum_kbar { H_M(q_j) : j in Jf }
//! ```
//!
//! with the Huber function `H_M(q) = q^2 / 2` for `|q| <= M` and
//! `M |q| - M^2 / 2` otherwise. The proximal step on `g` is evaluated through
//! Moreau's identity from the prox of `rho * g*`, which on the free block is an
//! isotonic problem over sorted magnitudes solved by pool-adjacent-violators.
//!
//! The batched kernel runs the same four stages over every column of a
//! `p x m` matrix: pad non-free magnitudes with a sentinel, sort each column in
//! descending order, pool around the `kbar | kbar + 1` boundary, scatter back.

use rayon::prelude::*;

use crate::heuristics::recover_on;
use crate::linalg::{transpose_into, Matrix};
use crate::node::{Fixing, NodeState};

/// Sort key for coordinates that are not free. Finite so comparisons stay total.
pub const SENTINEL: f64 = f64::MIN;

#[inline]
pub fn huber(q: f64, big_m: f64) -> f64 {
    let a = q.abs();
    if a <= big_m {
        0.5 * q * q
    } else {
        big_m * a - 0.5 * big_m * big_m
    }
}

/// `argmin_v 0.5 (v - x)^2 + weight * H_M(v)`.
#[inline]
pub fn prox_huber(x: f64, weight: f64, big_m: f64) -> f64 {
    if x.abs() <= (1.0 + weight) * big_m {
        x / (1.0 + weight)
    } else {
        x - weight * big_m * x.signum()
    }
}

/// Per-column structure of a node batch.
///
/// `fixing` is column-major: column `b` occupies `fixing[b*p..(b+1)*p]`.
#[derive(Debug, Clone)]
pub struct BatchMeta {
    p: usize,
    fixing: Vec<Fixing>,
    kbar: Vec<usize>,
    free_count: Vec<usize>,
}

impl BatchMeta {
    pub fn from_nodes<'a>(nodes: impl IntoIterator<Item = &'a NodeState>, k: usize) -> Self {
        let mut p = 0;
        let mut fixing = Vec::new();
        let mut kbar = Vec::new();
        let mut free_count = Vec::new();
        for node in nodes {
            p = node.p();
            fixing.extend_from_slice(node.fixings());
            kbar.push(node.reduced_budget(k));
            free_count.push(node.free_count());
        }
        BatchMeta { p, fixing, kbar, free_count }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn columns(&self) -> usize {
        self.kbar.len()
    }

    pub fn column_fixing(&self, b: usize) -> &[Fixing] {
        &self.fixing[b * self.p..(b + 1) * self.p]
    }

    pub fn kbar(&self, b: usize) -> usize {
        self.kbar[b]
    }

    pub fn free_count(&self, b: usize) -> usize {
        self.free_count[b]
    }

    /// Keeps only the listed columns, in order.
    pub fn select(&self, cols: &[usize]) -> BatchMeta {
        let mut fixing = Vec::with_capacity(cols.len() * self.p);
        for &b in cols {
            fixing.extend_from_slice(self.column_fixing(b));
        }
        BatchMeta {
            p: self.p,
            fixing,
            kbar: cols.iter().map(|&b| self.kbar[b]).collect(),
            free_count: cols.iter().map(|&b| self.free_count[b]).collect(),
        }
    }
}

/// Pooled interval `[start, end]` (inclusive, sorted ranks) from the boundary
/// scan, if any pooling happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PooledBlock {
    pub start: usize,
    pub end: usize,
}

#[inline]
fn pooled_value(a: &[f64], start: usize, end: usize, weighted: usize, weight: f64, big_m: f64) -> f64 {
    let len = (end - start + 1) as f64;
    let mut sum = 0.0;
    for &v in &a[start..=end] {
        sum += v;
    }
    prox_huber(sum / len, weight * weighted as f64 / len, big_m)
}

/// Weighted isotonic fit over nonincreasing magnitudes `a` where the first
/// `kbar` ranks carry Huber weight `weight` and the rest carry none.
///
/// Both halves are already ordered after the initial prox, so a violation can
/// only sit at the `kbar | kbar + 1` boundary; one block is grown outwards from
/// there until neither neighbour violates.
pub fn pava_boundary(a: &[f64], kbar: usize, weight: f64, big_m: f64, v: &mut [f64]) -> Option<PooledBlock> {
    let n = a.len();
    for r in 0..n {
        v[r] = if r < kbar { prox_huber(a[r], weight, big_m) } else { a[r] };
    }
    if kbar == 0 || kbar >= n || v[kbar - 1] >= v[kbar] {
        return None;
    }
    let (mut l, mut r) = (kbar - 1, kbar);
    let mut sum = a[l] + a[r];
    loop {
        let len = (r - l + 1) as f64;
        let val = prox_huber(sum / len, weight * (kbar - l) as f64 / len, big_m);
        if l > 0 && v[l - 1] < val {
            l -= 1;
            sum += a[l];
        } else if r + 1 < n && val < v[r + 1] {
            r += 1;
            sum += a[r];
        } else {
            break;
        }
    }
    let val = pooled_value(a, l, r, kbar - l, weight, big_m);
    v[l..=r].iter_mut().for_each(|t| *t = val);
    Some(PooledBlock { start: l, end: r })
}

/// Textbook stack-based PAVA for the same problem. Kept as a reference
/// implementation for [`pava_boundary`].
pub fn pava_generic(a: &[f64], kbar: usize, weight: f64, big_m: f64, v: &mut [f64]) {
    struct Block {
        start: usize,
        end: usize,
        sum: f64,
        weighted: usize,
        value: f64,
    }
    let mut stack: Vec<Block> = Vec::with_capacity(a.len());
    for (r, &ar) in a.iter().enumerate() {
        let w = usize::from(r < kbar);
        stack.push(Block {
            start: r,
            end: r,
            sum: ar,
            weighted: w,
            value: prox_huber(ar, weight * w as f64, big_m),
        });
        while stack.len() >= 2 && stack[stack.len() - 2].value < stack[stack.len() - 1].value {
            let top = stack.pop().unwrap();
            let prev = stack.last_mut().unwrap();
            prev.end = top.end;
            prev.sum += top.sum;
            prev.weighted += top.weighted;
            let len = (prev.end - prev.start + 1) as f64;
            prev.value = prox_huber(prev.sum / len, weight * prev.weighted as f64 / len, big_m);
        }
    }
    for b in &stack {
        let val = if b.start == b.end {
            prox_huber(a[b.start], weight * b.weighted as f64, big_m)
        } else {
            pooled_value(a, b.start, b.end, b.weighted, weight, big_m)
        };
        v[b.start..=b.end].iter_mut().for_each(|t| *t = val);
    }
}

/// Maps `x` to an integer that orders like [`f64::total_cmp`].
#[inline]
fn ordered_bits(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 { !b } else { b | (1 << 63) }
}

/// Fills `perm` with `0..p` ordered by key descending, ties by index.
///
/// Sorts packed `(inverted key, index)` integers, which is several times
/// faster than a comparator sort and gives the same order.
fn sort_column_desc(keys: &[f64], perm: &mut [u32], scratch: &mut [u128]) {
    for (i, (t, &k)) in scratch.iter_mut().zip(keys).enumerate() {
        *t = ((!ordered_bits(k) as u128) << 32) | i as u128;
    }
    scratch.sort_unstable();
    for (t, &packed) in perm.iter_mut().zip(scratch.iter()) {
        *t = packed as u32;
    }
}

/// Columnwise descending sort of a column-major `p x m` key matrix.
pub fn sort_columns_desc(keys: &[f64], p: usize, perm: &mut [u32]) {
    let mut scratch = vec![0u128; keys.len()];
    perm.par_chunks_mut(p)
        .zip(keys.par_chunks(p))
        .zip(scratch.par_chunks_mut(p))
        .for_each(|((pc, kc), sc)| sort_column_desc(kc, pc, sc));
}

/// Per-column scratch for the pad, sort and pool stages. Columns are processed
/// one at a time so this stays cache-resident however wide the batch is.
#[derive(Debug, Default, Clone)]
struct ColumnScratch {
    scaled: Vec<f64>,
    keys: Vec<f64>,
    perm: Vec<u32>,
    sorted: Vec<f64>,
    pooled: Vec<f64>,
    packed: Vec<u128>,
}

impl ColumnScratch {
    /// Pads, sorts and pools `w`; ranks land in `perm` / `pooled`.
    fn run(&mut self, w: &[f64], fix: &[Fixing], pf: usize, kbar: usize, weight: f64, big_m: f64) -> Option<PooledBlock> {
        let p = w.len();
        self.keys.resize(p, 0.0);
        self.perm.resize(p, 0);
        self.sorted.resize(p, 0.0);
        self.pooled.resize(p, 0.0);
        self.packed.resize(p, 0);
        for j in 0..p {
            self.keys[j] = if fix[j] == Fixing::Free { w[j].abs() } else { SENTINEL };
        }
        let kbar = kbar.min(pf);
        sort_and_pool(&self.keys, pf, kbar, weight, big_m, &mut self.perm, &mut self.sorted, &mut self.pooled, &mut self.packed)
    }
}

/// Sort-then-PAVA for one column, sorting lazily.
///
/// Ranks past the pooled block keep their own value, so only the prefix up to
/// the block end needs to be in order. The top `2 kbar + 8` ranks are selected
/// and sorted first and the window doubles while the block reaches its edge.
/// Ranks past the window are filled in unspecified order. Output on ranks that
/// matter is identical to a full sort.
#[allow(clippy::too_many_arguments)]
fn sort_and_pool(
    keys: &[f64],
    pf: usize,
    kbar: usize,
    weight: f64,
    big_m: f64,
    perm: &mut [u32],
    sorted: &mut [f64],
    pooled: &mut [f64],
    scratch: &mut [u128],
) -> Option<PooledBlock> {
    for (i, (t, &k)) in scratch.iter_mut().zip(keys).enumerate() {
        *t = ((!ordered_bits(k) as u128) << 32) | i as u128;
    }
    let mut done = 0;
    let mut window = if kbar == 0 { 0 } else { (2 * kbar + 8).min(pf) };
    let blk = loop {
        if window > done {
            let rest = &mut scratch[done..];
            let len = window - done;
            if len < rest.len() {
                rest.select_nth_unstable(len);
            }
            rest[..len].sort_unstable();
            for r in done..window {
                perm[r] = scratch[r] as u32;
                sorted[r] = keys[perm[r] as usize];
            }
            done = window;
        }
        let blk = pava_boundary(&sorted[..window], kbar, weight, big_m, &mut pooled[..window]);
        let complete = window == pf || blk.is_none_or(|bl| bl.end + 1 < window);
        if complete {
            break blk;
        }
        window = (2 * window).min(pf);
    };
    // remaining free ranks, all ranked past the block
    let tail = &mut scratch[done..];
    if pf - done < tail.len() && pf > done {
        tail.select_nth_unstable(pf - done);
    }
    for r in done..pf {
        perm[r] = scratch[r] as u32;
        sorted[r] = keys[perm[r] as usize];
        pooled[r] = sorted[r];
    }
    blk
}

/// `prox_{weight * g*_N}` applied to each column of `w_scaled` (`p x m`,
/// row-major), where column `b` uses node structure `meta` column `b`.
///
/// Coordinates in `J0` pass through unchanged (`g*` does not depend on them);
/// coordinates in `J1` get the scalar Huber prox.
pub fn batched_conjugate_prox(w_scaled: &Matrix, meta: &BatchMeta, weight: f64, big_m: f64) -> Matrix {
    let (p, m) = (w_scaled.rows(), w_scaled.cols());
    assert_eq!(p, meta.p());
    assert_eq!(m, meta.columns());
    let wcm = w_scaled.transpose();
    let mut alpha = vec![0.0; p * m];
    alpha.par_chunks_mut(p).enumerate().for_each_init(ColumnScratch::default, |cs, (b, ac)| {
        let fix = meta.column_fixing(b);
        let wc = &wcm.as_slice()[b * p..(b + 1) * p];
        let pf = meta.free_count(b);
        cs.run(wc, fix, pf, meta.kbar(b), weight, big_m);
        for j in 0..p {
            ac[j] = match fix[j] {
                Fixing::Zero => wc[j],
                Fixing::One => prox_huber(wc[j], weight, big_m),
                Fixing::Free => 0.0,
            };
        }
        for r in 0..pf {
            let j = cs.perm[r] as usize;
            ac[j] = cs.pooled[r].copysign(wc[j]);
        }
    });
    Matrix::from_row_major(m, p, alpha).transpose()
}

/// Reference one-column conjugate prox: own sort, same pooling.
pub fn conjugate_prox_column(w: &[f64], fixing: &[Fixing], kbar: usize, weight: f64, big_m: f64) -> Vec<f64> {
    let p = w.len();
    let free: Vec<usize> = (0..p).filter(|&j| fixing[j] == Fixing::Free).collect();
    let mut order = free.clone();
    order.sort_by(|&i, &j| w[j].abs().total_cmp(&w[i].abs()).then(i.cmp(&j)));
    let a: Vec<f64> = order.iter().map(|&j| w[j].abs()).collect();
    let mut v = vec![0.0; a.len()];
    pava_boundary(&a, kbar.min(a.len()), weight, big_m, &mut v);
    let mut out: Vec<f64> = (0..p)
        .map(|j| match fixing[j] {
            Fixing::Zero => w[j],
            Fixing::One => prox_huber(w[j], weight, big_m),
            Fixing::Free => 0.0,
        })
        .collect();
    for (r, &j) in order.iter().enumerate() {
        out[j] = v[r].copysign(w[j]);
    }
    out
}

/// Reusable state for repeated proximal steps on batches of the same shape.
#[derive(Debug, Default)]
pub struct ProxWorkspace {
    u_cm: Vec<f64>,
    out_cm: Vec<f64>,
}

/// Proximal step on `eta * 2 lambda2 * g_N` for every column, written into
/// `out` (row-major `p x m`).
///
/// Coordinates whose conjugate-side prox is the identity (all of `J0`, and free
/// coordinates ranked past `kbar` outside the pooled block) come out as exact
/// zeros.
pub(crate) fn prox_step_into(
    ws: &mut ProxWorkspace,
    u: &[f64],
    eta: f64,
    lambda2: f64,
    meta: &BatchMeta,
    big_m: f64,
    out: &mut [f64],
) {
    let p = meta.p();
    let m = meta.columns();
    let rho = 1.0 / (2.0 * eta * lambda2);
    ws.u_cm.resize(p * m, 0.0);
    transpose_into(u, p, m, &mut ws.u_cm);
    ws.out_cm.resize(p * m, 0.0);
    let u_cm = &ws.u_cm;
    ws.out_cm.par_chunks_mut(p).enumerate().for_each_init(ColumnScratch::default, |cs, (b, oc)| {
        let fix = meta.column_fixing(b);
        let ucol = &u_cm[b * p..(b + 1) * p];
        let mut wc = std::mem::take(&mut cs.scaled);
        wc.clear();
        wc.extend(ucol.iter().map(|v| rho * v));
        let kbar = meta.kbar(b);
        let pf = meta.free_count(b);
        let blk = cs.run(&wc, fix, pf, kbar, rho, big_m);
        for j in 0..p {
            oc[j] = match fix[j] {
                Fixing::Zero | Fixing::Free => 0.0,
                Fixing::One => (ucol[j] - prox_huber(wc[j], rho, big_m) / rho).clamp(-big_m, big_m),
            };
        }
        let last = blk.map_or(kbar, |bl| kbar.max(bl.end + 1)).min(pf);
        for r in 0..last {
            let in_block = blk.is_some_and(|bl| r >= bl.start && r <= bl.end);
            if r >= kbar && !in_block {
                continue;
            }
            let j = cs.perm[r] as usize;
            let alpha = cs.pooled[r].copysign(wc[j]);
            oc[j] = (ucol[j] - alpha / rho).clamp(-big_m, big_m);
        }
        cs.scaled = wc;
    });
    transpose_into(&ws.out_cm, m, p, out);
}

/// `prox_{eta G_N}(U)` columnwise with `G_N = 2 lambda2 g_N`, via
/// `U - rho^{-1} prox_{rho g*}(rho U)` and `rho = 1 / (2 eta lambda2)`.
pub fn prox_step(u: &Matrix, eta: f64, lambda2: f64, meta: &BatchMeta, big_m: f64) -> Matrix {
    let mut ws = ProxWorkspace::default();
    let mut out = Matrix::zeros(u.rows(), u.cols());
    prox_step_into(&mut ws, u.as_slice(), eta, lambda2, meta, big_m, out.as_mut_slice());
    out
}

/// Relative slack used when checking node-domain feasibility of iterates.
pub(crate) const FEAS_TOL: f64 = 1e-9;

/// `g_N(beta)` on one column given its fixing pattern.
pub(crate) fn g_value_column(beta: &[f64], fixing: &[Fixing], kbar: usize, big_m: f64) -> f64 {
    let mut half_sq_fixed = 0.0;
    let mut budget = 0.0;
    for (j, &b) in beta.iter().enumerate() {
        if b.abs() > big_m * (1.0 + FEAS_TOL) {
            return f64::INFINITY;
        }
        match fixing[j] {
            Fixing::Zero if b != 0.0 => return f64::INFINITY,
            Fixing::One => half_sq_fixed += 0.5 * b * b,
            Fixing::Free => budget += b.abs() / big_m,
            _ => {}
        }
    }
    if budget > kbar as f64 * (1.0 + FEAS_TOL) + FEAS_TOL {
        return f64::INFINITY;
    }
    match recover_on(beta, fixing, kbar, big_m) {
        Ok(rec) => {
            let mut free_part = 0.0;
            for (j, &b) in beta.iter().enumerate() {
                if fixing[j] != Fixing::Free || b == 0.0 {
                    continue;
                }
                let z = rec.z[j];
                if z <= 0.0 {
                    return f64::INFINITY;
                }
                free_part += 0.5 * b * b / z;
            }
            half_sq_fixed + free_part
        }
        Err(_) => f64::INFINITY,
    }
}

/// `g*_N(q)` on one column.
pub(crate) fn g_conjugate_column(q: &[f64], fixing: &[Fixing], kbar: usize, big_m: f64, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    let mut fixed = 0.0;
    for (j, &qj) in q.iter().enumerate() {
        match fixing[j] {
            Fixing::One => fixed += huber(qj, big_m),
            Fixing::Free => scratch.push(huber(qj, big_m)),
            Fixing::Zero => {}
        }
    }
    let top = if kbar >= scratch.len() {
        scratch.iter().sum::<f64>()
    } else if kbar == 0 {
        0.0
    } else {
        scratch.select_nth_unstable_by(kbar - 1, |a, b| b.total_cmp(a));
        scratch[..kbar].iter().sum::<f64>()
    };
    fixed + top
}

/// Perspective penalty `g_N(beta)`; `+inf` outside the node's domain.
pub fn g_value(beta: &[f64], node: &NodeState, k: usize, big_m: f64) -> f64 {
    g_value_column(beta, node.fixings(), node.reduced_budget(k), big_m)
}

/// Conjugate `g*_N(q)`; TopSum over fewer than `kbar` free entries sums them
/// all.
pub fn g_conjugate_value(q: &[f64], node: &NodeState, k: usize, big_m: f64) -> f64 {
    g_conjugate_column(q, node.fixings(), node.reduced_budget(k), big_m, &mut Vec::new())
}
