//! A laboratory for layerwise-relative neural network optimization.
//!
//! The crate builds multilayer perceptrons from scratch, trains them with
//! layerwise optimizers (Fromage, LARS, SGD, Adam), and measures how far the
//! network function, Jacobian and gradient drift under weight perturbations —
//! side by side with the multiplicative bounds that predict that drift.
//!
//! Module map:
//!
//! - [`linalg`] — dense `f64` matrices, Frobenius norms, singular extremes.
//! - [`net`] — perceptron forward pass, exact gradients, layer-to-output
//!   Jacobians, binary checkpoints.
//! - [`bounds`] — perturbation bounds and descent inequalities, each paired
//!   with the directly measured quantity it bounds.
//! - [`optim`] — Fromage / LARS / SGD / Adam steps, the norm-clamp
//!   regularizer, and learning-rate schedules.
//! - [`data`] — MNIST IDX ingestion, synthetic Gaussian class datasets,
//!   seeded batching.
//! - [`config`] / [`experiments`] — TOML-driven experiment commands with CSV
//!   persistence, used by the `fromage-lab` binary.

pub mod bounds;
pub mod config;
pub mod data;
pub mod experiments;
pub mod linalg;
pub mod net;
pub mod optim;

pub use linalg::{ConditionReport, LinalgError, Matrix};
pub use net::{ForwardTrace, GradientSet, LossKind, Mlp, MlpConfig, NetError, Nonlinearity};
pub use optim::{OptimizerKind, OptimizerState, Schedule};
