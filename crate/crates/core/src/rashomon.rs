//! Support-level Rashomon sets: collection during the tree search, compact
//! trie-and-offset storage, and pool analytics.

use std::collections::{BTreeMap, HashMap};

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::engine::{run_search, Certificate, Mode, SolveTrace, SolverConfig};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::problem::ProblemInstance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RashomonConfig {
    /// Relative tolerance: supports with `v(S) <= (1 + epsilon) * optimum` qualify.
    pub epsilon: f64,
    /// Keep only the best `cap` supports.
    pub cap: Option<usize>,
}

impl RashomonConfig {
    pub fn new(epsilon: f64, cap: Option<usize>) -> Self {
        RashomonConfig { epsilon, cap }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::input("epsilon must be finite and nonnegative"));
        }
        if self.cap == Some(0) {
            return Err(Error::input("pool cap must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LiveRecord {
    sequence: Vec<usize>,
    coefficients: Vec<f64>,
    objective: f64,
}

/// Records collected while the search runs, ordered by objective.
#[derive(Debug)]
pub(crate) struct LivePool {
    config: RashomonConfig,
    records: BTreeMap<(OrderedFloat<f64>, u64), LiveRecord>,
    keys: HashMap<Vec<usize>, (OrderedFloat<f64>, u64)>,
    seq: u64,
}

impl LivePool {
    pub(crate) fn new(config: RashomonConfig) -> Result<Self> {
        config.validate()?;
        Ok(LivePool { config, records: BTreeMap::new(), keys: HashMap::new(), seq: 0 })
    }

    /// `min((1 + eps) UB, v_(N))`, the N-th best stored objective counting only
    /// once the pool is full.
    pub(crate) fn threshold(&self, ub: f64) -> f64 {
        let base = (1.0 + self.config.epsilon) * ub;
        match self.config.cap {
            Some(n) if self.records.len() >= n => {
                let worst = self.records.last_key_value().map_or(f64::INFINITY, |((o, _), _)| o.0);
                base.min(worst)
            }
            _ => base,
        }
    }

    pub(crate) fn offer(&mut self, sequence: Vec<usize>, coefficients: Vec<f64>, objective: f64, ub: f64) {
        let mut set = sequence.clone();
        set.sort_unstable();
        if self.keys.contains_key(&set) || objective > self.threshold(ub) {
            return;
        }
        let key = (OrderedFloat(objective), self.seq);
        self.seq += 1;
        self.keys.insert(set, key);
        self.records.insert(key, LiveRecord { sequence, coefficients, objective });
        if let Some(n) = self.config.cap {
            while self.records.len() > n {
                self.pop_worst();
            }
        }
    }

    fn pop_worst(&mut self) {
        if let Some((_, rec)) = self.records.pop_last() {
            let mut set = rec.sequence;
            set.sort_unstable();
            self.keys.remove(&set);
        }
    }

    /// Drops records above `(1 + eps) UB` after the incumbent improves.
    pub(crate) fn refilter(&mut self, ub: f64) {
        let limit = (1.0 + self.config.epsilon) * ub;
        while self.records.last_key_value().is_some_and(|((o, _), _)| o.0 > limit) {
            self.pop_worst();
        }
    }

    pub(crate) fn into_trie(mut self, p: usize, ub: f64) -> SupportTrie {
        self.refilter(ub);
        let mut trie = SupportTrie::new(p);
        for rec in self.records.into_values() {
            trie.insert(&rec.sequence, &rec.coefficients, rec.objective).expect("pool records are valid");
        }
        trie
    }
}

/// Supports stored as root-to-leaf paths of a prefix tree, with all
/// coefficients in one flat vector sliced by offsets.
///
/// Vertex 0 is the root. Record `m` ends at vertex `leaf[m]`; its coefficients
/// are `coefficients[offsets[m]..offsets[m + 1]]`, ordered like the path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TrieData", into = "TrieData")]
pub struct SupportTrie {
    data: TrieData,
    children: HashMap<(usize, usize), usize>,
    sets: HashMap<Vec<usize>, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrieData {
    p: usize,
    parent: Vec<usize>,
    label: Vec<usize>,
    leaf: Vec<usize>,
    objectives: Vec<f64>,
    coefficients: Vec<f64>,
    offsets: Vec<usize>,
}

impl From<TrieData> for SupportTrie {
    fn from(data: TrieData) -> Self {
        let mut children = HashMap::new();
        for v in 1..data.parent.len() {
            children.insert((data.parent[v], data.label[v]), v);
        }
        let mut trie = SupportTrie { data, children, sets: HashMap::new() };
        for m in 0..trie.len() {
            let mut s = trie.path(trie.data.leaf[m]);
            s.sort_unstable();
            trie.sets.insert(s, m);
        }
        trie
    }
}

impl From<SupportTrie> for TrieData {
    fn from(t: SupportTrie) -> Self {
        t.data
    }
}

/// One stored record, recovered.
#[derive(Debug, Clone, PartialEq)]
pub struct TrieRecord {
    /// Sorted support.
    pub support: Vec<usize>,
    /// Labels along the root-to-leaf path.
    pub path: Vec<usize>,
    /// Coefficients aligned with `path`.
    pub coefficients: Vec<f64>,
    pub objective: f64,
}

impl SupportTrie {
    pub fn new(p: usize) -> Self {
        SupportTrie {
            data: TrieData {
                p,
                parent: vec![0],
                label: vec![0],
                leaf: Vec::new(),
                objectives: Vec::new(),
                coefficients: Vec::new(),
                offsets: vec![0],
            },
            children: HashMap::new(),
            sets: HashMap::new(),
        }
    }

    pub fn p(&self) -> usize {
        self.data.p
    }

    /// Number of stored records.
    pub fn len(&self) -> usize {
        self.data.leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.leaf.is_empty()
    }

    pub fn vertex_count(&self) -> usize {
        self.data.parent.len()
    }

    pub fn parents(&self) -> &[usize] {
        &self.data.parent
    }

    pub fn labels(&self) -> &[usize] {
        &self.data.label
    }

    pub fn leaves(&self) -> &[usize] {
        &self.data.leaf
    }

    pub fn offsets(&self) -> &[usize] {
        &self.data.offsets
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.data.coefficients
    }

    pub fn objectives(&self) -> &[f64] {
        &self.data.objectives
    }

    fn path(&self, mut v: usize) -> Vec<usize> {
        let mut labels = Vec::new();
        while v != 0 {
            labels.push(self.data.label[v]);
            v = self.data.parent[v];
        }
        labels.reverse();
        labels
    }

    /// Stores a record under the insertion sequence `labels`; returns its
    /// record id. A support already present (as a set) is not stored twice.
    pub fn insert(&mut self, labels: &[usize], coefficients: &[f64], objective: f64) -> Result<usize> {
        if labels.len() != coefficients.len() {
            return Err(Error::input("one coefficient per label is required"));
        }
        let mut set = labels.to_vec();
        set.sort_unstable();
        if set.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::input("support labels must be distinct"));
        }
        if set.last().is_some_and(|&j| j >= self.data.p) {
            return Err(Error::input("support label out of range"));
        }
        if let Some(&m) = self.sets.get(&set) {
            return Ok(m);
        }
        let mut v = 0;
        for &a in labels {
            v = match self.children.get(&(v, a)) {
                Some(&c) => c,
                None => {
                    let c = self.data.parent.len();
                    self.data.parent.push(v);
                    self.data.label.push(a);
                    self.children.insert((v, a), c);
                    c
                }
            };
        }
        let m = self.len();
        self.data.leaf.push(v);
        self.data.objectives.push(objective);
        self.data.coefficients.extend_from_slice(coefficients);
        self.data.offsets.push(self.data.coefficients.len());
        self.sets.insert(set, m);
        Ok(m)
    }

    pub fn recover(&self, record: usize) -> Result<TrieRecord> {
        if record >= self.len() {
            return Err(Error::Lookup(format!("no record {record} (pool has {})", self.len())));
        }
        let path = self.path(self.data.leaf[record]);
        let mut support = path.clone();
        support.sort_unstable();
        let (lo, hi) = (self.data.offsets[record], self.data.offsets[record + 1]);
        Ok(TrieRecord {
            support,
            path,
            coefficients: self.data.coefficients[lo..hi].to_vec(),
            objective: self.data.objectives[record],
        })
    }

    /// Dense length-`p` coefficients of a record.
    pub fn dense(&self, record: usize) -> Result<Vec<f64>> {
        let rec = self.recover(record)?;
        let mut beta = vec![0.0; self.p()];
        for (&j, &c) in rec.path.iter().zip(&rec.coefficients) {
            beta[j] = c;
        }
        Ok(beta)
    }
}

pub fn trie_insert(trie: &mut SupportTrie, labels: &[usize], coefficients: &[f64], objective: f64) -> Result<usize> {
    trie.insert(labels, coefficients, objective)
}

pub fn trie_recover(trie: &SupportTrie, record: usize) -> Result<TrieRecord> {
    trie.recover(record)
}

/// Certified solve that also returns every support within `(1 + epsilon)` of
/// the optimum (or the best `cap` of them), records sorted by objective.
pub fn collect_rashomon(
    instance: &ProblemInstance,
    config: &SolverConfig,
    rconfig: &RashomonConfig,
) -> Result<(Certificate, SupportTrie)> {
    rconfig.validate()?;
    let (cert, trie) = run_search(instance, config, Mode::Rashomon(*rconfig), None)?;
    Ok((cert, trie.expect("rashomon search returns a pool")))
}

/// [`collect_rashomon`] with the same diagnostics as [`crate::solve_traced`].
pub fn collect_rashomon_traced(
    instance: &ProblemInstance,
    config: &SolverConfig,
    rconfig: &RashomonConfig,
    trace: &mut SolveTrace,
) -> Result<(Certificate, SupportTrie)> {
    rconfig.validate()?;
    let (cert, trie) = run_search(instance, config, Mode::Rashomon(*rconfig), Some(trace))?;
    Ok((cert, trie.expect("rashomon search returns a pool")))
}

fn require_nonempty(trie: &SupportTrie) -> Result<()> {
    if trie.is_empty() {
        return Err(Error::input("the Rashomon pool is empty"));
    }
    Ok(())
}

/// Fraction of stored supports containing each feature.
pub fn support_frequency(trie: &SupportTrie) -> Result<Vec<f64>> {
    require_nonempty(trie)?;
    let mut counts = vec![0usize; trie.p()];
    for m in 0..trie.len() {
        for j in trie.recover(m)?.support {
            counts[j] += 1;
        }
    }
    let total = trie.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelianceRow {
    pub feature: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelianceReport {
    /// True when computed with squared loss, which extends the logistic
    /// definition.
    pub extended_to_squared: bool,
    pub rows: Vec<RelianceRow>,
}

fn predictions(instance: &ProblemInstance, path: &[usize], coefs: &[f64]) -> Vec<f64> {
    let x = instance.x();
    (0..instance.n())
        .map(|i| {
            let row = x.row(i);
            path.iter().zip(coefs).map(|(&j, &c)| row[j] * c).sum()
        })
        .collect()
}

fn mean_loss(kind: LossKind, eta: impl Iterator<Item = f64>, y: &[f64]) -> f64 {
    let total: f64 = eta.zip(y).map(|(e, &yi)| kind.value(e, yi)).sum();
    total / y.len() as f64
}

/// Per-feature reliance: mean loss after removing feature `j`'s contribution
/// from each model's linear predictor minus the model's mean loss, summarized
/// by (min, mean, max) over the pool.
pub fn model_reliance(trie: &SupportTrie, instance: &ProblemInstance) -> Result<RelianceReport> {
    require_nonempty(trie)?;
    let p = trie.p();
    let kind = instance.loss();
    let y = instance.y();
    let x = instance.x();
    let mut per_model = vec![vec![0.0; trie.len()]; p];
    for m in 0..trie.len() {
        let rec = trie.recover(m)?;
        let eta = predictions(instance, &rec.path, &rec.coefficients);
        let base = mean_loss(kind, eta.iter().copied(), y);
        for (&j, &c) in rec.path.iter().zip(&rec.coefficients) {
            if c == 0.0 {
                continue;
            }
            let dropped = mean_loss(kind, eta.iter().enumerate().map(|(i, &e)| e - x[(i, j)] * c), y);
            per_model[j][m] = dropped - base;
        }
    }
    let rows = per_model
        .into_iter()
        .enumerate()
        .map(|(feature, r)| RelianceRow {
            feature,
            min: r.iter().copied().fold(f64::INFINITY, f64::min),
            mean: r.iter().sum::<f64>() / r.len() as f64,
            max: r.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    Ok(RelianceReport { extended_to_squared: kind == LossKind::Squared, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    /// Position by objective, starting at 1.
    pub rank: usize,
    pub record: usize,
    pub objective: f64,
    pub auc: f64,
    pub accuracy: f64,
}

/// Mann-Whitney AUC of `scores` for labels in `{-1, +1}`, ties credited 1/2.
pub fn auc(scores: &[f64], y: &[f64]) -> Result<f64> {
    let n_pos = y.iter().filter(|&&v| v > 0.0).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::input("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &t in &order[i..=j] {
            if y[t] > 0.0 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUC and accuracy (positive when the predicted probability is at least
/// `threshold`) of every stored model, sorted by objective.
pub fn secondary_metrics(trie: &SupportTrie, instance: &ProblemInstance, threshold: f64) -> Result<Vec<ModelMetrics>> {
    require_nonempty(trie)?;
    if instance.loss() != LossKind::Logistic {
        return Err(Error::input("secondary metrics need a logistic instance"));
    }
    let y = instance.y();
    let mut rows = Vec::with_capacity(trie.len());
    for m in 0..trie.len() {
        let rec = trie.recover(m)?;
        let eta = predictions(instance, &rec.path, &rec.coefficients);
        let correct = eta
            .iter()
            .zip(y)
            .filter(|(&e, &yi)| {
                let pred = if crate::losses::sigmoid(e) >= threshold { 1.0 } else { -1.0 };
                pred == yi
            })
            .count();
        rows.push(ModelMetrics {
            rank: 0,
            record: m,
            objective: rec.objective,
            auc: auc(&eta, y)?,
            accuracy: correct as f64 / y.len() as f64,
        });
    }
    rows.sort_by(|a, b| a.objective.total_cmp(&b.objective).then(a.record.cmp(&b.record)));
    for (r, row) in rows.iter_mut().enumerate() {
        row.rank = r + 1;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked_example() -> SupportTrie {
        let mut t = SupportTrie::new(20);
        t.insert(&[18, 2, 7], &[0.4, -1.2, 0.3], 1.0).unwrap();
        t.insert(&[18, 2, 11], &[0.5, -1.0, 0.1], 2.0).unwrap();
        t.insert(&[18, 9, 3], &[0.2, 0.8, -0.4], 3.0).unwrap();
        t.insert(&[12, 4], &[-0.6, 1.1], 4.0).unwrap();
        t
    }

    #[test]
    fn worked_example_offsets_and_prefixes() {
        let t = worked_example();
        assert_eq!(t.offsets(), &[0, 3, 6, 9, 11]);
        // root + 18, 2, 7, 11, 9, 3, 12, 4
        assert_eq!(t.vertex_count(), 9);
        let rec = t.recover(1).unwrap();
        assert_eq!(rec.support, vec![2, 11, 18]);
        assert_eq!(rec.coefficients, t.coefficients()[3..6].to_vec());
        let freq = support_frequency(&t).unwrap();
        assert_eq!(freq[18], 0.75);
        assert_eq!(freq[0], 0.0);
    }

    #[test]
    fn duplicate_sets_are_idempotent() {
        let mut t = worked_example();
        assert_eq!(t.insert(&[7, 2, 18], &[0.0, 0.0, 0.0], 9.0).unwrap(), 0);
        assert_eq!(t.len(), 4);
        assert!(t.insert(&[1, 1], &[0.0, 0.0], 0.0).is_err());
        assert!(matches!(t.recover(4), Err(Error::Lookup(_))));
    }

    #[test]
    fn json_round_trip() {
        let t = worked_example();
        let s = serde_json::to_string(&t).unwrap();
        let back: SupportTrie = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn auc_named_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.9, 1.0], &[-1.0, -1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[-1.0, 1.0, -1.0, 1.0]).unwrap(), 0.5);
        assert!(auc(&[0.3; 2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn live_pool_cap_and_threshold() {
        let mut pool = LivePool::new(RashomonConfig::new(0.5, Some(2))).unwrap();
        pool.offer(vec![0], vec![1.0], 10.0, 10.0);
        pool.offer(vec![1], vec![1.0], 12.0, 10.0);
        assert_eq!(pool.threshold(10.0), 12.0);
        pool.offer(vec![2], vec![1.0], 11.0, 10.0);
        assert_eq!(pool.threshold(10.0), 11.0);
        pool.offer(vec![3], vec![1.0], 16.0, 10.0);
        let trie = pool.into_trie(4, 10.0);
        assert_eq!(trie.objectives(), &[10.0, 11.0]);
    }
}
