//! Core library for simulating asynchronous federated learning over a shared
//! wireless uplink and for optimizing the per-round client selection
//! probabilities and bandwidth fractions.
//!
//! Modules:
//! - [`wireless`]: path loss, channel gain, achievable rate, upload energy.
//! - [`solver`]: joint (offline) and per-round (online) optimization of
//!   selection probabilities and bandwidth fractions.
//! - [`task`]: synthetic classification data, label-skewed sharding, and a
//!   small from-scratch MLP trained with mini-batch SGD.
//! - [`engine`]: the asynchronous training loop (pseudo-gradients, divisor-K
//!   aggregation, Bernoulli participation).
//! - [`schemes`]: client selection policies (random, greedy, age-based,
//!   optimizer-driven).
//! - [`metrics`]: convergence bounds, communication-interval calculus, and
//!   fairness diagnostics.
//! - [`config`] / [`experiment`]: JSON experiment configs and the runners
//!   behind the command-line interface.

pub mod config;
pub mod engine;
pub mod experiment;
pub mod metrics;
pub mod schemes;
pub mod task;
pub mod seedmix;
pub mod solver;
pub mod wireless;

pub use solver::{ProblemInstance, SolveResult, SolverSettings};
pub use wireless::{CellConfig, ClientProfile, FadingConfig};
