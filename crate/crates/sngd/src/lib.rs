//! Structured natural-gradient descent with square-root precision factors
//! constrained to sparse matrix groups.
//!
//! The crate is organised in layers:
//!
//! * [`linalg`] — dense kernels (the `h` retraction, matrix exponential,
//!   Cholesky variants, triangular solves);
//! * [`groups`] — structured factors `B` (block triangular, Heisenberg-style,
//!   Kronecker) and the local directions `M` acting on them;
//! * [`objectives`] — test functions and models with gradient, Hessian-vector
//!   and Hessian-diagonal oracles;
//! * [`gaussian`] — Gaussian search distributions `N(μ, (BBᵀ)⁻¹)` and the
//!   deterministic Newton-like and Monte-Carlo variational updates;
//! * [`families`] — Wishart, mixture-of-Gaussians, univariate exponential
//!   family and matrix-Gaussian updates;
//! * [`baselines`] — the Adam optimizer used for comparisons;
//! * [`fim`] — brute-force Fisher information estimates for the local
//!   parameterization;
//! * [`checks`] — verification suites shared by `sngd check` and the
//!   acceptance harness;
//! * [`cli`] — the `sngd` command-line front end.

// Range checks are written as `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checks;
pub mod cli;
pub mod error;
pub mod families;
pub mod fim;
pub mod gaussian;
pub mod groups;
pub mod linalg;
pub mod objectives;

pub use error::{Result, SngdError};
