//! Certified optimal cardinality-constrained generalized linear models.
//!
//! The crate solves
//!
//! ```text
//! minimize  sum_i loss(x_i' beta, y_i) + lambda2 * ||beta||^2
//! subject to ||beta||_0 <= k,  ||beta||_inf <= M
//! ```
//!
//! for squared and logistic loss with an exact branch and bound that
//! processes open nodes in batches. Node lower bounds come from a perspective
//! relaxation solved by batched proximal gradient; every bound reported is a
//! Fenchel dual value, so pruning is safe regardless of how far the first-order
//! method converged. The same tree search can collect the support-level
//! Rashomon set of near-optimal sparse models.
//!
//! Squared loss uses the `0.5 * (s - y)^2` convention, so the loss derivative is
//! the residual. Compare `lambda2` with care against solvers that use
//! `(s - y)^2`.
//!
//! Feature indices are 0-based in the library and 1-based in the CLI and in
//! serialized certificates.

// `!(x > 0.0)` is how validation rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// The kernels index several parallel arrays per loop.
#![allow(clippy::needless_range_loop)]

pub mod engine;
pub mod error;
pub mod heuristics;
pub mod linalg;
pub mod losses;
pub mod node;
pub mod partition;
pub mod problem;
pub mod prox;
pub mod rashomon;
pub mod relaxation;

pub use engine::{
    auto_batch_size, batch_size_sweep, solve, solve_traced, BatchSize, Certificate,
    ComponentProfile, SolveStatus, SolveTrace, SolverConfig, SweepRow,
};
pub use error::{Error, Result};
pub use heuristics::{
    recover_indicators, reoptimize_supports, round_support, select_branch_variable,
    RecoveredIndicators, ReoptResult,
};
pub use linalg::Matrix;
pub use losses::{loss_conjugate, loss_derivative, loss_value, smoothness_constant, LossKind};
pub use node::{assemble_batch, branch, root_node, NodeBatch, NodeQueue, NodeState};
pub use partition::{partition_rows, partitioned_batch_eval, PartitionedEval, RowPartition};
pub use problem::{generate_synthetic, load_csv, preprocess, save_csv, ProblemInstance, SyntheticSpec};
pub use prox::{
    batched_conjugate_prox, g_conjugate_value, g_value, huber, prox_huber, prox_step, BatchMeta,
};
pub use rashomon::{
    collect_rashomon, collect_rashomon_traced, model_reliance, secondary_metrics, support_frequency, RashomonConfig,
    SupportTrie,
};
pub use relaxation::{solve_batch_relaxation, NodeOutcome, NodeStatus, RelaxConfig, RelaxationResult};
