//! Supervised graph structure learning with bilinear attention on covariance manifolds.
//!
//! The crate is organized as a pipeline:
//!
//! * [`graphs`] — random DAGs, three-class edge labels, CPDAGs and Meek rules.
//! * [`semgen`] — structural equation models that turn a DAG into training data.
//! * [`autodiff`] — a minimal reverse-mode tensor engine the networks are built on.
//! * [`net`] — the shape-agnostic edge-classification network.
//! * [`train`] — losses, Adam, the on-the-fly training loop and checkpoints.
//! * [`cpdagnet`] — the v-structure classifier and two-step CPDAG estimation.
//! * [`eval`] — metrics and the benchmark harness.
//! * [`formats`] — on-disk JSON/CSV conventions shared with the CLI.

pub mod autodiff;
pub mod cpdagnet;
pub mod eval;
pub mod formats;
pub mod graphs;
pub mod net;
pub mod rng;
pub mod semgen;
pub mod train;
