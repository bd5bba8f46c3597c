//! The batched branch-and-bound loop: batch assembly, batched lower bounds,
//! batched re-optimization of rounded supports, pruning and branching, plus
//! the certificate and component profile it reports.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::heuristics::{reoptimize_supports, round_support, select_branch_variable, ReoptResult};
use crate::losses::LossKind;
use crate::node::{assemble_batch, branch, root_node, Incumbent, NodeQueue, NodeState, PruneRule};
use crate::problem::ProblemInstance;
use crate::rashomon::{LivePool, RashomonConfig, SupportTrie};
use crate::relaxation::{solve_relaxation_traced, NodeStatus, RelaxConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSize {
    Fixed(usize),
    /// Chosen by [`auto_batch_size`] from `memory_budget`.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub batch_size: BatchSize,
    /// Wall-clock limit in seconds.
    pub time_limit: Option<f64>,
    /// Relative prune slack `delta`; nodes are pruned once their bound reaches
    /// `UB - delta * max(1, |UB|)`.
    pub prune_slack: f64,
    pub relax: RelaxConfig,
    /// Bytes available to one batch when `batch_size` is `Auto`.
    pub memory_budget: u64,
    /// Include the component profile in serialized certificates.
    pub profile: bool,
    /// Worker threads for the data-parallel kernels; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            batch_size: BatchSize::Fixed(64),
            time_limit: None,
            prune_slack: 1e-6,
            relax: RelaxConfig::default(),
            memory_budget: 1 << 30,
            profile: false,
            threads: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let BatchSize::Fixed(0) = self.batch_size {
            return Err(Error::input("batch size must be at least 1"));
        }
        if !(self.prune_slack >= 0.0) {
            return Err(Error::input("prune slack must be nonnegative"));
        }
        if let Some(t) = self.time_limit {
            if !(t > 0.0) {
                return Err(Error::input("time limit must be positive"));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::input("thread count must be at least 1"));
        }
        self.relax.validate()
    }
}

/// Seconds spent per solver component. The buckets partition the solve's
/// wall time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentProfile {
    pub lower_bound: f64,
    pub reoptimization: f64,
    pub transfer: f64,
    pub branch_and_generate: f64,
    pub total: f64,
}

impl ComponentProfile {
    pub fn components(&self) -> [(&'static str, f64); 4] {
        [
            ("lower_bound", self.lower_bound),
            ("reoptimization", self.reoptimization),
            ("transfer", self.transfer),
            ("branch_and_generate", self.branch_and_generate),
        ]
    }

    pub fn percent(&self, seconds: f64) -> f64 {
        if self.total > 0.0 {
            100.0 * seconds / self.total
        } else {
            0.0
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (name, secs) in self.components() {
            obj.insert(name.into(), json!({ "seconds": secs, "percent": self.percent(secs) }));
        }
        obj.insert("total".into(), json!({ "seconds": self.total, "percent": 100.0 }));
        serde_json::Value::Object(obj)
    }

    /// `component,seconds,percent` rows including the total.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,seconds,percent\n");
        for (name, secs) in self.components() {
            out.push_str(&format!("{name},{secs:?},{:?}\n", self.percent(secs)));
        }
        out.push_str(&format!("total,{:?},100.0\n", self.total));
        out
    }
}

#[derive(Clone, Copy)]
enum Bucket {
    LowerBound,
    Reopt,
    Transfer,
    Branch,
}

/// Charges every elapsed interval to exactly one bucket.
struct LapTimer {
    start: Instant,
    last: Instant,
    acc: [f64; 4],
}

impl LapTimer {
    fn new() -> Self {
        let now = Instant::now();
        LapTimer { start: now, last: now, acc: [0.0; 4] }
    }

    fn lap(&mut self, bucket: Bucket) {
        let now = Instant::now();
        self.acc[bucket as usize] += (now - self.last).as_secs_f64();
        self.last = now;
    }

    fn profile(&self) -> ComponentProfile {
        ComponentProfile {
            lower_bound: self.acc[Bucket::LowerBound as usize],
            reoptimization: self.acc[Bucket::Reopt as usize],
            transfer: self.acc[Bucket::Transfer as usize],
            branch_and_generate: self.acc[Bucket::Branch as usize],
            total: (self.last - self.start).as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    TimeLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub optimal_value: f64,
    pub lower_bound: f64,
    /// Dense length-`p` coefficients.
    pub coefficients: Vec<f64>,
    /// Sorted 0-based support.
    pub support: Vec<usize>,
    pub gap_percent: f64,
    /// Every node popped from the queue, including ones discarded on their
    /// stored bound.
    pub nodes_processed: usize,
    pub lb_batches: usize,
    pub reopt_batches: usize,
    pub batch_size: usize,
    pub profile: ComponentProfile,
    pub status: SolveStatus,
}

impl Certificate {
    /// JSON document with 1-based support. The profile is wall-clock data and
    /// only included on request, so certificates of identical runs compare
    /// equal byte for byte.
    pub fn to_json(&self, include_profile: bool) -> serde_json::Value {
        let mut doc = json!({
            "status": self.status,
            "optimal_value": self.optimal_value,
            "lower_bound": self.lower_bound,
            "gap_percent": self.gap_percent,
            "support": self.support.iter().map(|j| j + 1).collect::<Vec<_>>(),
            "coefficients": self.coefficients,
            "nodes": self.nodes_processed,
            "batches": { "lower_bound": self.lb_batches, "reoptimization": self.reopt_batches },
            "batch_size": self.batch_size,
        });
        if include_profile {
            doc["profile"] = self.profile.to_json();
        }
        doc
    }
}

/// One dual bound computed during a solve, with the node it bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundRecord {
    pub fixed_zero: Vec<usize>,
    pub fixed_one: Vec<usize>,
    pub bound: f64,
}

/// Diagnostics recorded by [`solve_traced`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    /// Every dual value computed for every relaxed node.
    pub bounds: Vec<BoundRecord>,
    /// Nodes pruned after relaxation, with the bound that pruned them.
    pub pruned: Vec<BoundRecord>,
    /// Incumbent objective after each batch.
    pub upper_bounds: Vec<f64>,
    /// Global lower bound after each batch.
    pub lower_bounds: Vec<f64>,
}

/// Bytes one node occupies in the lower-bound workspace: iterate,
/// extrapolation, previous iterate, gradient step, gradient and dual columns,
/// the padded sort keys with permutation and PAVA buffers, and the `n`-length
/// predictor and derivative columns.
fn lower_bound_bytes(n: usize, p: usize) -> u64 {
    (8 * (6 * p + 5 * p + 2 * n) + 4 * p) as u64
}

/// Bytes of one re-optimization: gathered design columns, predictions and
/// iterates; logistic fits also keep probability and score arrays.
fn reopt_bytes(n: usize, k: usize, kind: LossKind) -> u64 {
    let base = 8 * (n * k + n + 3 * k + k * k);
    let extra = match kind {
        LossKind::Squared => 0,
        LossKind::Logistic => 8 * 2 * n,
    };
    (base + extra) as u64
}

/// Largest power of two not exceeding `0.9 * budget / bytes_per_node`, at
/// least 1.
pub fn auto_batch_size(memory_budget: u64, n: usize, p: usize, k: usize, kind: LossKind) -> usize {
    let per_node = lower_bound_bytes(n, p) + reopt_bytes(n, k, kind);
    let cap = (memory_budget as f64 * 0.9 / per_node as f64).floor();
    if cap < 2.0 {
        return 1;
    }
    let cap = cap.min((1u64 << 62) as f64) as u64;
    1usize << (63 - cap.leading_zeros())
}

pub(crate) enum Mode {
    Optimize,
    Rashomon(RashomonConfig),
}

pub fn solve(instance: &ProblemInstance, config: &SolverConfig) -> Result<Certificate> {
    run_search(instance, config, Mode::Optimize, None).map(|(c, _)| c)
}

/// [`solve`] that also records every dual bound, prune and batch-level bound.
pub fn solve_traced(instance: &ProblemInstance, config: &SolverConfig, trace: &mut SolveTrace) -> Result<Certificate> {
    run_search(instance, config, Mode::Optimize, Some(trace)).map(|(c, _)| c)
}

pub(crate) fn run_search(
    instance: &ProblemInstance,
    config: &SolverConfig,
    mode: Mode,
    trace: Option<&mut SolveTrace>,
) -> Result<(Certificate, Option<SupportTrie>)> {
    config.validate()?;
    let mut timer = LapTimer::new();
    let result = match config.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::input(format!("cannot build worker pool: {e}")))?;
            pool.install(|| search(instance, config, mode, trace, &mut timer))
        }
        None => search(instance, config, mode, trace, &mut timer),
    };
    result.map_err(|e| match e {
        Error::Numeric { node, message, profile: None } => {
            timer.lap(Bucket::Branch);
            Error::Numeric { node, message, profile: Some(Box::new(timer.profile())) }
        }
        other => other,
    })
}

const EVALUATED_CACHE_LIMIT: usize = 1 << 20;

struct Search<'a> {
    instance: &'a ProblemInstance,
    queue: NodeQueue,
    pool: Option<LivePool>,
    evaluated: HashSet<Vec<usize>>,
    delta: f64,
}

impl Search<'_> {
    fn rule(&self) -> PruneRule {
        let ub = self.queue.upper_bound();
        match &self.pool {
            None => PruneRule::AtLeast(ub - self.delta * ub.abs().max(1.0)),
            Some(pool) => PruneRule::Above(pool.threshold(ub)),
        }
    }

    /// Supports not yet re-optimized, deduplicated within the call.
    fn fresh(&mut self, supports: Vec<(Vec<usize>, Vec<usize>)>) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for (support, sequence) in supports {
            if self.evaluated.contains(&support) || !seen.insert(support.clone()) {
                continue;
            }
            out.push((support, sequence));
        }
        out
    }

    fn absorb(&mut self, results: Vec<ReoptResult>, sequences: Vec<Vec<usize>>) {
        let p = self.instance.p();
        for (res, seq) in results.into_iter().zip(sequences) {
            if self.evaluated.len() < EVALUATED_CACHE_LIMIT {
                self.evaluated.insert(res.support.clone());
            }
            let improved = self.queue.offer_incumbent(Incumbent {
                support: res.support.clone(),
                coefficients: res.dense(p),
                objective: res.objective,
            });
            if let Some(pool) = &mut self.pool {
                let ub = self.queue.upper_bound();
                if improved {
                    pool.refilter(ub);
                }
                let coefs: Vec<f64> = seq
                    .iter()
                    .map(|j| res.coefficients[res.support.binary_search(j).expect("sequence within support")])
                    .collect();
                pool.offer(seq, coefs, res.objective, ub);
            }
        }
    }
}

/// Storage sequence for a support: indices fixed to one in branching order,
/// then the remaining ones by decreasing relaxed magnitude.
fn storage_sequence(node: &NodeState, support: &[usize], beta: Option<&[f64]>) -> Vec<usize> {
    let mut seq: Vec<usize> = node.fixed_one().to_vec();
    let mut rest: Vec<usize> = support.iter().copied().filter(|j| !seq.contains(j)).collect();
    if let Some(beta) = beta {
        rest.sort_by(|&a, &b| beta[b].abs().total_cmp(&beta[a].abs()).then(a.cmp(&b)));
    }
    seq.extend(rest);
    seq
}

fn search(
    instance: &ProblemInstance,
    config: &SolverConfig,
    mode: Mode,
    mut trace: Option<&mut SolveTrace>,
    timer: &mut LapTimer,
) -> Result<(Certificate, Option<SupportTrie>)> {
    let p = instance.p();
    let k = instance.k();
    let big_m = instance.big_m();
    let batch_size = match config.batch_size {
        BatchSize::Fixed(b) => b,
        BatchSize::Auto => auto_batch_size(config.memory_budget, instance.n(), p, k, instance.loss()),
    };
    let rashomon = matches!(mode, Mode::Rashomon(_));
    let mut st = Search {
        instance,
        queue: NodeQueue::new(),
        pool: match mode {
            Mode::Optimize => None,
            Mode::Rashomon(rc) => Some(LivePool::new(rc)?),
        },
        evaluated: HashSet::new(),
        delta: if rashomon { 0.0 } else { config.prune_slack },
    };
    // smoothness constant for the relaxation stepsize
    instance.smoothness();
    timer.lap(Bucket::LowerBound);

    // The empty model is always feasible and seeds the incumbent.
    let first = reoptimize_supports(&[Vec::new()], instance);
    let mut reopt_batches = 1;
    timer.lap(Bucket::Reopt);
    st.absorb(first, vec![Vec::new()]);
    st.queue.push(root_node(p));
    let mut lb_batches = 0;
    let mut status = SolveStatus::Optimal;
    let started = Instant::now();
    timer.lap(Bucket::Branch);

    loop {
        if let Some(limit) = config.time_limit {
            if started.elapsed().as_secs_f64() >= limit && !st.queue.is_empty() {
                status = SolveStatus::TimeLimit;
                break;
            }
        }
        let rule = st.rule();
        let batch = assemble_batch(&mut st.queue, batch_size, rule);
        if batch.is_empty() {
            break;
        }
        lb_batches += 1;
        let mut relax_nodes = Vec::new();
        let mut candidates: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        for node in batch.nodes {
            if node.is_terminal(k) || (!rashomon && node.budget_slack(k)) {
                let mut support: Vec<usize> = node.fixed_one().to_vec();
                support.extend(node.free());
                support.sort_unstable();
                let seq = storage_sequence(&node, &support, Some(&node.warm_start));
                candidates.push((support, seq));
            } else {
                relax_nodes.push(node);
            }
        }
        timer.lap(Bucket::Transfer);

        let outcomes = if relax_nodes.is_empty() {
            Vec::new()
        } else {
            let result = match trace.as_deref_mut() {
                Some(tr) => {
                    let nodes = &relax_nodes;
                    let mut sink = |c: usize, v: f64| {
                        tr.bounds.push(BoundRecord {
                            fixed_zero: nodes[c].fixed_zero().to_vec(),
                            fixed_one: nodes[c].fixed_one().to_vec(),
                            bound: v,
                        })
                    };
                    solve_relaxation_traced(nodes, instance, &config.relax, rule, &mut sink)?
                }
                None => solve_relaxation_traced(&relax_nodes, instance, &config.relax, rule, &mut |_, _| {})?,
            };
            result.outcomes
        };
        timer.lap(Bucket::LowerBound);

        for (node, out) in relax_nodes.iter().zip(&outcomes) {
            if out.status == NodeStatus::Prunable {
                continue;
            }
            let support = round_support(&out.beta, node, k);
            let seq = storage_sequence(node, &support, Some(&out.beta));
            candidates.push((support, seq));
        }
        let fresh = st.fresh(candidates);
        timer.lap(Bucket::Branch);
        if !fresh.is_empty() {
            let (supports, sequences): (Vec<_>, Vec<_>) = fresh.into_iter().unzip();
            let results = reoptimize_supports(&supports, instance);
            reopt_batches += 1;
            timer.lap(Bucket::Reopt);
            st.absorb(results, sequences);
        }

        let rule = st.rule();
        for (node, out) in relax_nodes.into_iter().zip(outcomes) {
            let bound = out.bound.max(node.lower_bound);
            if rule.prunes(bound) {
                if let Some(tr) = trace.as_deref_mut() {
                    tr.pruned.push(BoundRecord {
                        fixed_zero: node.fixed_zero().to_vec(),
                        fixed_one: node.fixed_one().to_vec(),
                        bound,
                    });
                }
                continue;
            }
            let j = select_branch_variable(&out.beta, &node)?;
            let (mut zero, mut one) = branch(&node, j, &out.beta, k, big_m)?;
            zero.lower_bound = bound;
            one.lower_bound = bound;
            st.queue.push(zero);
            st.queue.push(one);
        }
        if let Some(tr) = trace.as_deref_mut() {
            let ub = st.queue.upper_bound();
            tr.upper_bounds.push(ub);
            tr.lower_bounds.push(st.queue.global_lb().min(ub));
        }
        timer.lap(Bucket::Branch);
    }

    let incumbent = st.queue.incumbent().cloned().ok_or_else(|| Error::logic("no incumbent"))?;
    let ub = incumbent.objective;
    let (lower_bound, gap_percent) = match status {
        SolveStatus::Optimal => (ub, 0.0),
        SolveStatus::TimeLimit => {
            let lb = st.queue.global_lb().min(ub);
            let gap = if ub - lb <= 0.0 { 0.0 } else { 100.0 * (ub - lb) / ub.abs().max(f64::MIN_POSITIVE) };
            (lb, gap)
        }
    };
    let trie = st.pool.take().map(|pool| pool.into_trie(p, ub));
    timer.lap(Bucket::Branch);
    let cert = Certificate {
        optimal_value: ub,
        lower_bound,
        coefficients: incumbent.coefficients,
        support: incumbent.support,
        gap_percent,
        nodes_processed: st.queue.popped(),
        lb_batches,
        reopt_batches,
        batch_size,
        profile: timer.profile(),
        status,
    };
    Ok((cert, trie))
}

/// One row of a batch-size sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub batch_size: usize,
    pub seconds: f64,
    pub nodes: usize,
    pub gap_percent: f64,
    pub optimal_value: f64,
    /// Set when this size failed; the sweep continues.
    pub error: Option<String>,
}

/// One full solve per batch size, otherwise identical configuration.
pub fn batch_size_sweep(instance: &ProblemInstance, sizes: &[usize], config: &SolverConfig) -> Vec<SweepRow> {
    sizes
        .iter()
        .map(|&size| {
            let cfg = SolverConfig { batch_size: BatchSize::Fixed(size), ..config.clone() };
            let start = Instant::now();
            match solve(instance, &cfg) {
                Ok(cert) => SweepRow {
                    batch_size: size,
                    seconds: start.elapsed().as_secs_f64(),
                    nodes: cert.nodes_processed,
                    gap_percent: cert.gap_percent,
                    optimal_value: cert.optimal_value,
                    error: None,
                },
                Err(e) => SweepRow {
                    batch_size: size,
                    seconds: start.elapsed().as_secs_f64(),
                    nodes: 0,
                    gap_percent: f64::NAN,
                    optimal_value: f64::NAN,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}
