//! Deep stochastic-maximum-principle (SMP) solvers for constrained utility
//! maximization on finite-horizon Itô markets.
//!
//! The crate trains per-time-step neural networks inside a forward Euler
//! discretization of the wealth/adjoint FBSDE system (primal side) and of the
//! dual-state/adjoint system (dual side), producing Monte-Carlo lower and
//! upper bounds on the value function that cross-validate each other. A
//! deterministic oracle computes the exact dual value for log-utility markets
//! with deterministic coefficients, giving an external benchmark.
//!
//! Module map:
//! - [`diffcore`] — minimal reverse-mode autodiff over batched `f64` matrices
//! - [`nn`] — dense + batch-norm heads with hard output constraints
//! - [`optim`] — Adam and piecewise-constant learning-rate schedules
//! - [`utility`] — log/power utilities and their Legendre–Fenchel transforms
//! - [`constraints`] — admissible cones, support functions, dual domains
//! - [`market`] — coefficient models and batched Euler–Maruyama steppers
//! - [`solver`] — the primal and dual training loops and bound estimators
//! - [`oracle`] — deterministic dual-value benchmark evaluator
//! - [`config`] / [`runner`] — experiment configs, CSV/JSON outputs

pub mod config;
pub mod constraints;
pub mod diffcore;
pub mod linalg;
pub mod market;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod runner;
pub mod solver;
pub mod utility;
