//! Selective-attention federated learning, simulated end to end at desk scale.
//!
//! Every round, each simulated client profiles how much attention the
//! layers of a small transformer encoder pay to task tokens, fine-tunes only
//! its top-K layers, and transmits just those layer deltas. The server
//! averages whatever arrives. Everything is deterministic from one master
//! seed.
//!
//! | module | what it holds |
//! |---|---|
//! | [`tensor`] | f64 tensors, tape autodiff, labelled RNG streams |
//! | [`encoder`] | transformer encoder with attention capture and layer freezing |
//! | [`selector`] | cumulative attention scores, top-K selection, update pruning |
//! | [`privacy`] | per-example clipping, Gaussian noise, budget ledger |
//! | [`fedsim`] | rounds, strategies, FedAvg aggregation, comm ledger, metrics |
//! | [`synthdata`] | synthetic tagged corpus and Dirichlet partitioning |
//! | [`convergence`] | contraction bound and quadratic Monte-Carlo harness |
//! | [`cli`] | run configuration, artifacts, sweeps and reports |
//!
//! See the crate's `examples/` directory for one runnable program per
//! capability.

pub mod cli;
pub mod convergence;
pub mod encoder;
mod error;
pub mod fedsim;
pub mod privacy;
pub mod selector;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
