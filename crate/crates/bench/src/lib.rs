//! Shared fixtures for the criterion benches.

use glmcert::problem::Constraints;
use glmcert::{generate_synthetic, preprocess, LossKind, ProblemInstance, SyntheticSpec};

/// Preprocessed Toeplitz instance with `M = 2`, `lambda2 = 1`.
pub fn fixture(n: usize, p: usize, k: usize, rho: f64, loss: LossKind, seed: u64) -> ProblemInstance {
    let raw = generate_synthetic(&SyntheticSpec::new(n, p, k, rho, loss, seed)).expect("valid generator spec");
    preprocess(&raw)
        .with_constraints(Constraints { k, big_m: 2.0, lambda2: 1.0 })
        .expect("valid constraints")
}
