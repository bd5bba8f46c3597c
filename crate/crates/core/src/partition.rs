//! Row-distributed evaluation: every row group computes its local predictors,
//! derivatives and feature-space products; a coordinator sums them in group
//! order. Node-dependent terms (`g`, `g*`) are evaluated only on the reduced
//! quantities and are therefore not part of this module.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::problem::ProblemInstance;
use crate::relaxation::{backward, conjugate_sums, derivatives_into, loss_sums, scaled_dual_from_gradient};
use crate::linalg::gemm;

/// Contiguous row groups of one instance.
#[derive(Debug, Clone)]
pub struct RowPartition {
    bounds: Vec<(usize, usize)>,
    x: Vec<Matrix>,
    xt: Vec<Matrix>,
    y: Vec<Vec<f64>>,
}

impl RowPartition {
    pub fn groups(&self) -> usize {
        self.bounds.len()
    }

    /// Half-open row ranges, in order.
    pub fn bounds(&self) -> &[(usize, usize)] {
        &self.bounds
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.bounds.iter().map(|(a, b)| b - a).collect()
    }

    pub fn block(&self, d: usize) -> (&Matrix, &[f64]) {
        (&self.x[d], &self.y[d])
    }
}

/// `D` contiguous groups whose sizes differ by at most one, larger first.
pub fn partition_rows(instance: &ProblemInstance, groups: usize) -> Result<RowPartition> {
    let n = instance.n();
    if groups == 0 || groups > n {
        return Err(Error::input(format!("need 1 <= D <= n = {n}, got D = {groups}")));
    }
    let (base, extra) = (n / groups, n % groups);
    let mut bounds = Vec::with_capacity(groups);
    let mut start = 0;
    for d in 0..groups {
        let len = base + usize::from(d < extra);
        bounds.push((start, start + len));
        start += len;
    }
    let x: Vec<Matrix> = bounds.iter().map(|&(a, b)| instance.x().slice_rows(a, b)).collect();
    let xt = x.iter().map(Matrix::transpose).collect();
    let y = bounds.iter().map(|&(a, b)| instance.y()[a..b].to_vec()).collect();
    Ok(RowPartition { bounds, x, xt, y })
}

/// Reduced batched quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedEval {
    /// `X' R`, `p x m`.
    pub gradient: Matrix,
    /// `(2 lambda2)^-1 X' Z` with `Z = -R`, `p x m`.
    pub dual: Matrix,
    /// Columnwise `sum_i loss(S_ib, y_i)`.
    pub loss_terms: Vec<f64>,
    /// Columnwise `-sum_i loss*(R_ib, y_i)`, the data part of the dual value.
    pub conjugate_terms: Vec<f64>,
}

struct Local {
    g: Vec<f64>,
    q: Vec<f64>,
    phi: Vec<f64>,
    psi: Vec<f64>,
}

/// Evaluates `B` (`p x m`) group by group and reduces in group order.
pub fn partitioned_batch_eval(b: &Matrix, partition: &RowPartition, instance: &ProblemInstance, lambda2: f64) -> PartitionedEval {
    let (p, m) = (b.rows(), b.cols());
    let loss = instance.loss();
    let locals: Vec<Local> = (0..partition.groups())
        .into_par_iter()
        .map(|d| {
            let (x, y) = partition.block(d);
            let mut s = vec![0.0; x.rows() * m];
            gemm(x.as_slice(), x.rows(), p, b.as_slice(), m, &mut s);
            let mut r = Vec::new();
            derivatives_into(loss, &s, y, m, &mut r);
            let mut g = Vec::new();
            backward(&partition.xt[d], &r, m, &mut g);
            let mut q = Vec::new();
            scaled_dual_from_gradient(&g, lambda2, &mut q);
            let mut phi = Vec::new();
            loss_sums(loss, &s, y, m, &mut phi);
            let mut conj = Vec::new();
            conjugate_sums(loss, &r, y, m, &mut conj);
            let psi = conj.into_iter().map(|v| -v).collect();
            Local { g, q, phi, psi }
        })
        .collect();
    let mut it = locals.into_iter();
    let mut acc = it.next().expect("at least one group");
    for local in it {
        add(&mut acc.g, &local.g);
        add(&mut acc.q, &local.q);
        add(&mut acc.phi, &local.phi);
        add(&mut acc.psi, &local.psi);
    }
    PartitionedEval {
        gradient: Matrix::from_row_major(p, m, acc.g),
        dual: Matrix::from_row_major(p, m, acc.q),
        loss_terms: acc.phi,
        conjugate_terms: acc.psi,
    }
}

fn add(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}
