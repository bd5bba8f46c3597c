//! Branch-and-bound nodes, the best-bound open-node queue and batch assembly.

use std::collections::BTreeMap;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fixing {
    Free,
    Zero,
    One,
}

/// Partial fixing of the support indicators plus warm start and bound.
///
/// `fixed_one` keeps the order in which indicators were fixed to one; that
/// order is reused as the storage sequence for Rashomon records.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    fixing: Vec<Fixing>,
    fixed_zero: Vec<usize>,
    fixed_one: Vec<usize>,
    pub warm_start: Vec<f64>,
    pub lower_bound: f64,
    pub depth: usize,
}

impl NodeState {
    pub fn p(&self) -> usize {
        self.fixing.len()
    }

    pub fn fixing(&self, j: usize) -> Fixing {
        self.fixing[j]
    }

    pub fn fixings(&self) -> &[Fixing] {
        &self.fixing
    }

    pub fn fixed_zero(&self) -> &[usize] {
        &self.fixed_zero
    }

    pub fn fixed_one(&self) -> &[usize] {
        &self.fixed_one
    }

    pub fn free(&self) -> Vec<usize> {
        self.fixing.iter().enumerate().filter(|(_, f)| **f == Fixing::Free).map(|(j, _)| j).collect()
    }

    pub fn free_count(&self) -> usize {
        self.p() - self.fixed_zero.len() - self.fixed_one.len()
    }

    /// `k - |J1|`.
    pub fn reduced_budget(&self, k: usize) -> usize {
        k.saturating_sub(self.fixed_one.len())
    }

    /// A node whose feasible supports are a single set: either the budget is
    /// exhausted or nothing is free.
    pub fn is_terminal(&self, k: usize) -> bool {
        self.fixed_one.len() >= k || self.free_count() == 0
    }

    /// Every support in the subtree is a subset of `J1 u Jf` of size at most
    /// `k`, so the best one is `J1 u Jf` itself.
    pub fn budget_slack(&self, k: usize) -> bool {
        self.fixed_one.len() + self.free_count() <= k
    }

    /// Sufficient feasibility check of a coefficient vector for this node's
    /// relaxation domain.
    pub fn is_feasible(&self, beta: &[f64], k: usize, big_m: f64, tol: f64) -> bool {
        let mut budget = 0.0;
        for (j, &b) in beta.iter().enumerate() {
            if b.abs() > big_m * (1.0 + tol) {
                return false;
            }
            match self.fixing[j] {
                Fixing::Zero if b != 0.0 => return false,
                Fixing::Free => budget += b.abs() / big_m,
                _ => {}
            }
        }
        budget <= self.reduced_budget(k) as f64 + tol
    }

    fn restore_budget(&mut self, k: usize, big_m: f64) {
        let kbar = self.reduced_budget(k) as f64;
        for (j, b) in self.warm_start.iter_mut().enumerate() {
            if self.fixing[j] == Fixing::Zero {
                *b = 0.0;
            } else {
                *b = b.clamp(-big_m, big_m);
            }
        }
        let used: f64 = self
            .warm_start
            .iter()
            .zip(&self.fixing)
            .filter(|(_, f)| **f == Fixing::Free)
            .map(|(b, _)| b.abs() / big_m)
            .sum();
        if used > kbar {
            let scale = if used > 0.0 { kbar / used } else { 0.0 };
            for (b, f) in self.warm_start.iter_mut().zip(&self.fixing) {
                if *f == Fixing::Free {
                    *b *= scale;
                }
            }
        }
    }

    fn fix(&mut self, j: usize, value: Fixing) {
        self.fixing[j] = value;
        match value {
            Fixing::Zero => self.fixed_zero.push(j),
            Fixing::One => self.fixed_one.push(j),
            Fixing::Free => unreachable!(),
        }
    }
}

/// Root node: nothing fixed, zero warm start, bound `-inf`.
pub fn root_node(p: usize) -> NodeState {
    NodeState {
        fixing: vec![Fixing::Free; p],
        fixed_zero: Vec::new(),
        fixed_one: Vec::new(),
        warm_start: vec![0.0; p],
        lower_bound: f64::NEG_INFINITY,
        depth: 0,
    }
}

/// Splits `node` on free index `j` into `(z_j = 0, z_j = 1)` children.
///
/// Children inherit the node's bound and `relaxed_beta` as warm start. When the
/// one-child exhausts the budget its remaining free indices move to `J0`.
pub fn branch(
    node: &NodeState,
    j: usize,
    relaxed_beta: &[f64],
    k: usize,
    big_m: f64,
) -> Result<(NodeState, NodeState)> {
    if j >= node.p() || node.fixing[j] != Fixing::Free {
        return Err(Error::logic(format!("cannot branch on index {j}: not free")));
    }
    if node.fixed_one.len() >= k {
        return Err(Error::logic("cannot branch a node whose budget is exhausted"));
    }
    let mut zero = NodeState {
        warm_start: relaxed_beta.to_vec(),
        depth: node.depth + 1,
        ..node.clone()
    };
    zero.fix(j, Fixing::Zero);
    zero.restore_budget(k, big_m);

    let mut one = NodeState {
        warm_start: relaxed_beta.to_vec(),
        depth: node.depth + 1,
        ..node.clone()
    };
    one.fix(j, Fixing::One);
    if one.fixed_one.len() == k {
        for t in 0..one.p() {
            if one.fixing[t] == Fixing::Free {
                one.fix(t, Fixing::Zero);
            }
        }
    }
    one.restore_budget(k, big_m);
    Ok((zero, one))
}

/// Node-selection threshold rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneRule {
    /// Ordinary optimization: prune when `lb >= threshold`.
    AtLeast(f64),
    /// Rashomon collection: prune only when `lb > threshold`.
    Above(f64),
}

impl PruneRule {
    pub fn prunes(&self, lb: f64) -> bool {
        match *self {
            PruneRule::AtLeast(t) => lb >= t,
            PruneRule::Above(t) => lb > t,
        }
    }

    pub fn threshold(&self) -> f64 {
        match *self {
            PruneRule::AtLeast(t) | PruneRule::Above(t) => t,
        }
    }
}

/// Best feasible model found so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Incumbent {
    /// Sorted 0-based support.
    pub support: Vec<usize>,
    /// Dense length-`p` coefficients.
    pub coefficients: Vec<f64>,
    pub objective: f64,
}

/// Open nodes ordered by `(lower_bound, insertion sequence)`.
#[derive(Debug, Default)]
pub struct NodeQueue {
    open: BTreeMap<(OrderedFloat<f64>, u64), NodeState>,
    next_seq: u64,
    popped: usize,
    incumbent: Option<Incumbent>,
}

impl NodeQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, node: NodeState) {
        let key = (OrderedFloat(node.lower_bound), self.next_seq);
        self.next_seq += 1;
        self.open.insert(key, node);
    }

    pub fn pop(&mut self) -> Option<NodeState> {
        let node = self.open.pop_first().map(|(_, n)| n);
        if node.is_some() {
            self.popped += 1;
        }
        node
    }

    pub fn len(&self) -> usize {
        self.open.len()
    }

    pub fn is_empty(&self) -> bool {
        self.open.is_empty()
    }

    /// Number of nodes ever popped, including threshold-discarded ones.
    pub fn popped(&self) -> usize {
        self.popped
    }

    /// Smallest open-node bound, `+inf` when empty.
    pub fn global_lb(&self) -> f64 {
        self.open.first_key_value().map_or(f64::INFINITY, |((lb, _), _)| lb.0)
    }

    pub fn incumbent(&self) -> Option<&Incumbent> {
        self.incumbent.as_ref()
    }

    pub fn upper_bound(&self) -> f64 {
        self.incumbent.as_ref().map_or(f64::INFINITY, |i| i.objective)
    }

    /// Replaces the incumbent if `candidate` is strictly better.
    pub fn offer_incumbent(&mut self, candidate: Incumbent) -> bool {
        if candidate.objective < self.upper_bound() {
            self.incumbent = Some(candidate);
            true
        } else {
            false
        }
    }
}

/// Nodes popped together for one batched pass.
#[derive(Debug, Default)]
pub struct NodeBatch {
    pub nodes: Vec<NodeState>,
    /// Nodes popped but discarded because their stored bound met the rule.
    pub discarded: usize,
}

impl NodeBatch {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Pops up to `batch_size` nodes in queue order, dropping any whose stored
/// bound is pruned by `rule`. Empty only when the queue drains.
pub fn assemble_batch(queue: &mut NodeQueue, batch_size: usize, rule: PruneRule) -> NodeBatch {
    let batch_size = batch_size.max(1);
    let mut batch = NodeBatch::default();
    while batch.nodes.len() < batch_size {
        let Some(node) = queue.pop() else { break };
        if rule.prunes(node.lower_bound) {
            batch.discarded += 1;
        } else {
            batch.nodes.push(node);
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn root_has_everything_free() {
        let r = root_node(6);
        assert_eq!(r.free(), (0..6).collect::<Vec<_>>());
        assert_eq!(r.reduced_budget(3), 3);
        assert!(r.is_feasible(&r.warm_start, 3, 1e-3, 0.0));
        assert_eq!(r.lower_bound, f64::NEG_INFINITY);
    }

    #[test]
    fn branch_path_builds_ordered_fixed_one() {
        // 1-based path z18 = 1, z2 = 1, z7 = 1
        let p = 20;
        let beta = vec![0.0; p];
        let mut node = root_node(p);
        for j in [17, 1, 6] {
            node = branch(&node, j, &beta, 3, 2.0).unwrap().1;
        }
        let one_based: Vec<usize> = node.fixed_one().iter().map(|j| j + 1).collect();
        assert_eq!(one_based, vec![18, 2, 7]);
        assert!(node.is_terminal(3));
        assert_eq!(node.free_count(), 0);
    }

    #[test]
    fn children_partition_free_set() {
        let node = root_node(5);
        let beta = vec![0.5, -1.0, 0.0, 0.25, 0.1];
        let (z, o) = branch(&node, 2, &beta, 2, 1.0).unwrap();
        let expect: Vec<usize> = vec![0, 1, 3, 4];
        assert_eq!(z.free(), expect);
        assert_eq!(o.free(), expect);
        // beta_j = 0 so zeroing changes nothing
        assert_eq!(z.warm_start, beta);
        assert!(branch(&z, 2, &beta, 2, 1.0).is_err());
    }

    #[test]
    fn one_child_warm_start_rescaled_to_budget() {
        let node = root_node(4);
        let beta = vec![1.0, 1.0, 0.5, 0.5];
        let (_, one) = branch(&node, 0, &beta, 3, 1.0).unwrap();
        assert!(one.is_feasible(&one.warm_start, 3, 1.0, 1e-12));
        let (_, one) = branch(&one, 1, &one.warm_start.clone(), 3, 1.0).unwrap();
        assert!(one.is_feasible(&one.warm_start, 3, 1.0, 1e-12));
    }

    #[test]
    fn exhausting_budget_fixes_rest_to_zero() {
        let node = root_node(4);
        let (_, one) = branch(&node, 3, &[0.1, 0.2, 0.3, 0.4], 1, 1.0).unwrap();
        assert_eq!(one.fixed_zero(), &[0, 1, 2]);
        assert_eq!(one.warm_start, vec![0.0, 0.0, 0.0, 0.4]);
    }

    #[test]
    fn queue_is_best_bound_fifo() {
        let mut q = NodeQueue::new();
        for (i, lb) in [3.0, 1.0, 1.0, 2.0].iter().enumerate() {
            let mut n = root_node(2);
            n.lower_bound = *lb;
            n.depth = i;
            q.push(n);
        }
        assert_eq!(q.global_lb(), 1.0);
        let order: Vec<usize> = std::iter::from_fn(|| q.pop()).map(|n| n.depth).collect();
        assert_eq!(order, vec![1, 2, 3, 0]);
        assert_eq!(q.global_lb(), f64::INFINITY);
        assert_eq!(q.popped(), 4);
    }

    #[test]
    fn assemble_respects_threshold_and_size() {
        let mut q = NodeQueue::new();
        for lb in [0.0, 1.0, 2.0] {
            let mut n = root_node(2);
            n.lower_bound = lb;
            q.push(n);
        }
        let b = assemble_batch(&mut q, 8, PruneRule::AtLeast(10.0));
        assert_eq!(b.len(), 3);

        for lb in [5.0, 6.0] {
            let mut n = root_node(2);
            n.lower_bound = lb;
            q.push(n);
        }
        let b = assemble_batch(&mut q, 8, PruneRule::AtLeast(5.0));
        assert!(b.is_empty());
        assert_eq!(b.discarded, 2);
        assert!(q.is_empty());

        let mut n = root_node(2);
        n.lower_bound = 5.0;
        q.push(n);
        assert_eq!(assemble_batch(&mut q, 1, PruneRule::Above(5.0)).len(), 1);
    }
}
