//! Ergodic control of nondegenerate controlled diffusions by relative value
//! iteration.
//!
//! The crate discretizes a controlled diffusion
//! `dX = b(X, U) dt + σ(X) dW` with running cost `r(X, U)` on a truncated
//! rectangular grid using a monotone (Markov chain approximation) scheme, and
//! provides:
//!
//! * [`stationary`]: policy iteration for the ergodic HJB equation
//!   `a^{ij} ∂_ij V + min_u [b·∇V + r] = ρ`, Poisson solves and invariant
//!   distributions of the discrete chains;
//! * [`evolve`]: time marching of the value iteration (VI) and relative value
//!   iteration (RVI) Cauchy problems and the transformations between them;
//! * [`montecarlo`]: Euler–Maruyama simulation under grid Markov policies,
//!   used as an independent check of the grid quantities;
//! * [`diagnose`]: convergence and boundedness diagnostics along trajectories.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod diagnose;
pub mod discretize;
pub mod error;
pub mod evolve;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod stationary;

pub use error::{Error, Result};
pub use model::{ControlProblem, ControlSet, Field, GridSpec};
