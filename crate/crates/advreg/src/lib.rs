//! Adversarially resilient linear regression.
//!
//! Training is modeled as a pessimistic two-level game: a learner fits ridge
//! regression while an adversary moves a block of training rows to push
//! predictions toward shifted targets, constrained to stay cosine-similar to
//! the original rows. The first-order conditions of both levels are folded
//! into one nonsmooth equation system via the Fischer-Burmeister function and
//! solved with a damped Levenberg-Marquardt method.
//!
//! Modules:
//! - [`model`]: problem data and the two objectives
//! - [`calculus`]: analytic gradients/Hessians plus finite-difference checks
//! - [`stationarity`]: the stacked stationarity system and its Jacobian
//! - [`solver`]: the nonsmooth Levenberg-Marquardt solver
//! - [`attack`]: test-time evasion attack generation
//! - [`baselines`]: plain ridge regression and a best-response descent model
//! - [`data`]: CSV loading, normalization, splits, evaluation
//! - [`experiment`]: grid sweeps and deterministic reports
//! - [`synthetic`]: deterministic fixtures and benchmark-shaped tables

pub mod attack;
pub mod baselines;
pub mod calculus;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod solver;
pub mod stationarity;
pub mod synthetic;

pub use error::{Error, Result};
pub use model::{AdversaryBlock, Dataset, ModelConfig, Weights};
pub use solver::{solve, SolveOutcome, SolveStatus, SolverConfig};
pub use stationarity::BilevelProblem;
