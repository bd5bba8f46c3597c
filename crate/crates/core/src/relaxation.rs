//! Batched lower bounds: proximal gradient on the perspective relaxation of
//! many nodes at once, with Fenchel dual values as safe bounds.
//!
//! Column `b` of the coefficient matrix `B` (`p x m`, row-major) belongs to
//! node `b` of the batch. One iteration is two GEMMs (`S = X B`,
//! `G = X' R`), an entrywise derivative pass and a batched prox.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix};
use crate::losses::LossKind;
use crate::node::{NodeState, PruneRule};
use crate::problem::ProblemInstance;
use crate::prox::{g_conjugate_column, g_value_column, prox_step_into, BatchMeta, ProxWorkspace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxConfig {
    pub max_iterations: usize,
    /// Relative duality gap `(primal - dual) / max(1, |primal|)` at which a
    /// column counts as converged.
    pub gap_tolerance: f64,
    /// Iterations between primal/dual evaluations.
    pub check_interval: usize,
    /// Accelerated proximal gradient with duality-gap restart.
    pub acceleration: bool,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        RelaxConfig { max_iterations: 2000, gap_tolerance: 1e-6, check_interval: 10, acceleration: true }
    }
}

impl RelaxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 || self.check_interval < 1 || !(self.gap_tolerance > 0.0) {
            return Err(Error::input(
                "relaxation needs max_iterations >= 1, check_interval >= 1 and gap_tolerance > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Prunable,
    Converged,
    IterationCapped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeOutcome {
    /// Final relaxed coefficients.
    pub beta: Vec<f64>,
    /// Best safe lower bound: the node's incoming bound or the largest dual
    /// value seen, whichever is larger.
    pub bound: f64,
    /// Relaxation objective at `beta`.
    pub primal: f64,
    pub status: NodeStatus,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationResult {
    pub outcomes: Vec<NodeOutcome>,
    /// Iterations run by the longest-lived column.
    pub iterations: usize,
}

/// Columnwise iterate and the batched quantities derived from it.
#[derive(Debug, Clone)]
pub struct BatchWorkspace {
    b: Matrix,
    s: Vec<f64>,
    r: Vec<f64>,
    q: Vec<f64>,
    primal: Vec<f64>,
    dual: Vec<f64>,
    fresh: bool,
}

impl BatchWorkspace {
    pub fn new(b: Matrix) -> Self {
        BatchWorkspace {
            b,
            s: Vec::new(),
            r: Vec::new(),
            q: Vec::new(),
            primal: Vec::new(),
            dual: Vec::new(),
            fresh: false,
        }
    }

    pub fn from_nodes(nodes: &[NodeState]) -> Self {
        let p = nodes.first().map_or(0, |n| n.p());
        let m = nodes.len();
        let mut b = Matrix::zeros(p, m);
        for (c, node) in nodes.iter().enumerate() {
            b.set_column(c, &node.warm_start);
        }
        Self::new(b)
    }

    pub fn coefficients(&self) -> &Matrix {
        &self.b
    }

    pub fn set_coefficients(&mut self, b: Matrix) {
        self.b = b;
        self.fresh = false;
    }

    /// `S = X B`, `n x m` row-major.
    pub fn predictors(&self) -> &[f64] {
        &self.s
    }

    /// Entrywise loss derivatives at `S`.
    pub fn derivatives(&self) -> &[f64] {
        &self.r
    }

    /// `Q = (2 lambda2)^-1 X' Z` with `Z = -R`, `p x m`.
    pub fn scaled_dual(&self) -> &[f64] {
        &self.q
    }

    pub fn primal(&self) -> &[f64] {
        &self.primal
    }

    pub fn dual(&self) -> &[f64] {
        &self.dual
    }
}

pub(crate) fn forward(instance: &ProblemInstance, b: &[f64], m: usize, s: &mut Vec<f64>) {
    s.resize(instance.n() * m, 0.0);
    gemm(instance.x().as_slice(), instance.n(), instance.p(), b, m, s);
}

pub(crate) fn derivatives_into(loss: LossKind, s: &[f64], y: &[f64], m: usize, r: &mut Vec<f64>) {
    r.resize(s.len(), 0.0);
    for (i, &yi) in y.iter().enumerate() {
        for c in 0..m {
            r[i * m + c] = loss.derivative(s[i * m + c], yi);
        }
    }
}

pub(crate) fn backward(xt: &Matrix, r: &[f64], m: usize, g: &mut Vec<f64>) {
    g.resize(xt.rows() * m, 0.0);
    gemm(xt.as_slice(), xt.rows(), xt.cols(), r, m, g);
}

/// Columnwise `sum_i loss(S_ib, y_i)`, accumulated in row order.
pub(crate) fn loss_sums(loss: LossKind, s: &[f64], y: &[f64], m: usize, out: &mut Vec<f64>) {
    out.clear();
    out.resize(m, 0.0);
    for (i, &yi) in y.iter().enumerate() {
        for c in 0..m {
            out[c] += loss.value(s[i * m + c], yi);
        }
    }
}

/// Columnwise `sum_i loss*(R_ib, y_i)`, accumulated in row order.
pub(crate) fn conjugate_sums(loss: LossKind, r: &[f64], y: &[f64], m: usize, out: &mut Vec<f64>) {
    out.clear();
    out.resize(m, 0.0);
    for (i, &yi) in y.iter().enumerate() {
        for c in 0..m {
            out[c] += loss.conjugate(r[i * m + c], yi);
        }
    }
}

/// `Q = (2 lambda2)^-1 X' Z` from `G = X' R`, using `X' Z = -G`.
pub(crate) fn scaled_dual_from_gradient(g: &[f64], lambda2: f64, q: &mut Vec<f64>) {
    q.resize(g.len(), 0.0);
    let denom = 2.0 * lambda2;
    for (qv, &gv) in q.iter_mut().zip(g) {
        *qv = -gv / denom;
    }
}

fn check_finite(b: &[f64], m: usize) -> Result<()> {
    if let Some(pos) = b.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            node: pos % m,
            message: "non-finite coefficient iterate".into(),
            profile: None,
        });
    }
    Ok(())
}

/// `X' R` at the workspace coefficients; caches `S` and `R`.
pub fn batched_gradient(ws: &mut BatchWorkspace, instance: &ProblemInstance) -> Result<Matrix> {
    let m = ws.b.cols();
    check_finite(ws.b.as_slice(), m)?;
    forward(instance, ws.b.as_slice(), m, &mut ws.s);
    derivatives_into(instance.loss(), &ws.s, instance.y(), m, &mut ws.r);
    let mut g = Vec::new();
    backward(instance.xt(), &ws.r, m, &mut g);
    ws.fresh = true;
    Ok(Matrix::from_row_major(instance.p(), m, g))
}

fn column(mat: &[f64], p: usize, m: usize, c: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend((0..p).map(|j| mat[j * m + c]));
}

/// Dual values `-sum_i loss*(R_ib, y_i) - 2 lambda2 g*_b(Q_b)`; each is a valid
/// lower bound on node `b`'s relaxation, whatever `B` is.
pub fn dual_bounds(ws: &mut BatchWorkspace, meta: &BatchMeta, instance: &ProblemInstance) -> Vec<f64> {
    let m = ws.b.cols();
    let p = instance.p();
    if !ws.fresh {
        forward(instance, ws.b.as_slice(), m, &mut ws.s);
        derivatives_into(instance.loss(), &ws.s, instance.y(), m, &mut ws.r);
        ws.fresh = true;
    }
    let mut g = Vec::new();
    backward(instance.xt(), &ws.r, m, &mut g);
    scaled_dual_from_gradient(&g, instance.lambda2(), &mut ws.q);
    let mut conj = Vec::new();
    conjugate_sums(instance.loss(), &ws.r, instance.y(), m, &mut conj);
    let two_l = 2.0 * instance.lambda2();
    let (mut col, mut scratch) = (Vec::new(), Vec::new());
    ws.dual = (0..m)
        .map(|c| {
            column(&ws.q, p, m, c, &mut col);
            -conj[c] - two_l * g_conjugate_column(&col, meta.column_fixing(c), meta.kbar(c), instance.big_m(), &mut scratch)
        })
        .collect();
    ws.dual.clone()
}

/// Relaxation objectives `sum_i loss(S_ib, y_i) + 2 lambda2 g_b(B_b)`;
/// `+inf` for columns outside their node's domain.
pub fn primal_values(ws: &mut BatchWorkspace, meta: &BatchMeta, instance: &ProblemInstance) -> Vec<f64> {
    let m = ws.b.cols();
    let p = instance.p();
    if !ws.fresh {
        forward(instance, ws.b.as_slice(), m, &mut ws.s);
        derivatives_into(instance.loss(), &ws.s, instance.y(), m, &mut ws.r);
        ws.fresh = true;
    }
    let mut sums = Vec::new();
    loss_sums(instance.loss(), &ws.s, instance.y(), m, &mut sums);
    let two_l = 2.0 * instance.lambda2();
    let mut col = Vec::new();
    ws.primal = (0..m)
        .map(|c| {
            column(ws.b.as_slice(), p, m, c, &mut col);
            sums[c] + two_l * g_value_column(&col, meta.column_fixing(c), meta.kbar(c), instance.big_m())
        })
        .collect();
    ws.primal.clone()
}

/// Solves the relaxations of `nodes` together.
///
/// Columns freeze (and drop out of all further work) once their bound
/// satisfies `prune`, their relative gap reaches `gap_tolerance`, or the
/// iteration cap is hit.
pub fn solve_batch_relaxation(
    nodes: &[NodeState],
    instance: &ProblemInstance,
    config: &RelaxConfig,
    prune: PruneRule,
) -> Result<RelaxationResult> {
    solve_relaxation_traced(nodes, instance, config, prune, &mut |_, _| {})
}

struct Column {
    best_dual: f64,
    primal: f64,
    prev_gap: f64,
    t: f64,
    iterations: usize,
    status: Option<NodeStatus>,
}

/// As [`solve_batch_relaxation`], reporting every dual value computed as
/// `(batch index, value)`.
pub fn solve_relaxation_traced(
    nodes: &[NodeState],
    instance: &ProblemInstance,
    config: &RelaxConfig,
    prune: PruneRule,
    sink: &mut dyn FnMut(usize, f64),
) -> Result<RelaxationResult> {
    config.validate()?;
    if nodes.is_empty() {
        return Err(Error::input("relaxation batch is empty"));
    }
    let p = instance.p();
    let k = instance.k();
    let big_m = instance.big_m();
    let lambda2 = instance.lambda2();
    let eta = 1.0 / instance.smoothness();
    let loss = instance.loss();
    let y = instance.y();

    let mut finals: Vec<Vec<f64>> = nodes.iter().map(|n| n.warm_start.clone()).collect();
    let mut cols: Vec<Column> = nodes
        .iter()
        .map(|n| Column {
            best_dual: n.lower_bound,
            primal: f64::INFINITY,
            prev_gap: f64::INFINITY,
            t: 1.0,
            iterations: 0,
            status: None,
        })
        .collect();
    let mut active: Vec<usize> = (0..nodes.len()).collect();
    let mut meta = BatchMeta::from_nodes(nodes.iter(), k);
    let mut m = active.len();
    let mut b = Matrix::zeros(p, m);
    for (c, node) in nodes.iter().enumerate() {
        b.set_column(c, &node.warm_start);
    }
    let mut point = b.clone();
    let mut prev = b.clone();
    let mut u = vec![0.0; p * m];
    let (mut s, mut r, mut g, mut q) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut lsum, mut csum) = (Vec::new(), Vec::new());
    let (mut colbuf, mut scratch) = (Vec::new(), Vec::new());
    let mut prox_ws = ProxWorkspace::default();
    let mut it = 0usize;
    let two_l = 2.0 * lambda2;

    loop {
        if it.is_multiple_of(config.check_interval) || it == config.max_iterations {
            check_finite(b.as_slice(), m).map_err(|e| match e {
                Error::Numeric { node, message, profile } => Error::Numeric { node: active[node], message, profile },
                other => other,
            })?;
            forward(instance, b.as_slice(), m, &mut s);
            derivatives_into(loss, &s, y, m, &mut r);
            backward(instance.xt(), &r, m, &mut g);
            scaled_dual_from_gradient(&g, lambda2, &mut q);
            loss_sums(loss, &s, y, m, &mut lsum);
            conjugate_sums(loss, &r, y, m, &mut csum);
            let mut frozen = false;
            for c in 0..m {
                let orig = active[c];
                let fix = meta.column_fixing(c);
                let kbar = meta.kbar(c);
                column(&q, p, m, c, &mut colbuf);
                let dual = -csum[c] - two_l * g_conjugate_column(&colbuf, fix, kbar, big_m, &mut scratch);
                column(b.as_slice(), p, m, c, &mut colbuf);
                let primal = lsum[c] + two_l * g_value_column(&colbuf, fix, kbar, big_m);
                if dual.is_nan() || primal.is_nan() {
                    return Err(Error::Numeric { node: orig, message: "NaN objective value".into(), profile: None });
                }
                debug_assert!(
                    dual <= primal + 1e-9 * primal.abs().max(1.0),
                    "weak duality violated: dual {dual} > primal {primal}"
                );
                sink(orig, dual);
                let col = &mut cols[orig];
                col.best_dual = col.best_dual.max(dual);
                col.primal = primal;
                col.iterations = it;
                let gap = primal - dual;
                if config.acceleration && gap > col.prev_gap {
                    col.t = 1.0;
                    for j in 0..p {
                        point[(j, c)] = b[(j, c)];
                    }
                }
                col.prev_gap = gap;
                col.status = if prune.prunes(col.best_dual) {
                    Some(NodeStatus::Prunable)
                } else if (primal - col.best_dual) / primal.abs().max(1.0) <= config.gap_tolerance {
                    Some(NodeStatus::Converged)
                } else if it >= config.max_iterations {
                    Some(NodeStatus::IterationCapped)
                } else {
                    None
                };
                if col.status.is_some() {
                    finals[orig] = colbuf.clone();
                    frozen = true;
                }
            }
            if frozen {
                let keep: Vec<usize> = (0..m).filter(|&c| cols[active[c]].status.is_none()).collect();
                if keep.is_empty() {
                    break;
                }
                b = b.select_columns(&keep);
                point = point.select_columns(&keep);
                meta = meta.select(&keep);
                active = keep.iter().map(|&c| active[c]).collect();
                m = active.len();
                prev = Matrix::zeros(p, m);
                u.resize(p * m, 0.0);
            }
        }
        it += 1;
        let at = if config.acceleration { &point } else { &b };
        forward(instance, at.as_slice(), m, &mut s);
        derivatives_into(loss, &s, y, m, &mut r);
        backward(instance.xt(), &r, m, &mut g);
        for ((uv, &av), &gv) in u.iter_mut().zip(at.as_slice()).zip(&g) {
            *uv = av - eta * gv;
        }
        std::mem::swap(&mut prev, &mut b);
        prox_step_into(&mut prox_ws, &u, eta, lambda2, &meta, big_m, b.as_mut_slice());
        if config.acceleration {
            let mom: Vec<f64> = active
                .iter()
                .map(|&orig| {
                    let col = &mut cols[orig];
                    let t_next = 0.5 * (1.0 + (1.0 + 4.0 * col.t * col.t).sqrt());
                    let mom = (col.t - 1.0) / t_next;
                    col.t = t_next;
                    mom
                })
                .collect();
            let (bs, ps, pts) = (b.as_slice(), prev.as_slice(), point.as_mut_slice());
            for j in 0..p {
                for c in 0..m {
                    let idx = j * m + c;
                    pts[idx] = bs[idx] + mom[c] * (bs[idx] - ps[idx]);
                }
            }
        }
    }

    let iterations = cols.iter().map(|c| c.iterations).max().unwrap_or(0);
    let outcomes = nodes
        .iter()
        .zip(cols)
        .zip(finals)
        .map(|((_, col), beta)| NodeOutcome {
            beta,
            bound: col.best_dual,
            primal: col.primal,
            status: col.status.unwrap_or(NodeStatus::IterationCapped),
            iterations: col.iterations,
        })
        .collect();
    Ok(RelaxationResult { outcomes, iterations })
}
