//! Personalized federated learning simulator.
//!
//! Every client trains a small backbone, an uncertainty-estimation block
//! (compact MLP, hypergraph convolution, private estimator) and an
//! expression-classification block whose labels are refined by hypergraph
//! label propagation. Shared tensors and class prototypes are averaged on the
//! server; the uncertainty estimator never leaves its client.
//!
//! Module map:
//! - [`numcore`]: dense matrices, solvers, MLP layers, deterministic RNG, gradient checks.
//! - [`hypergraph`]: k-NN hypergraphs, normalized operator, HGNN layers.
//! - [`ue_block`]: uncertainty weights, weight regularization, logit-weighted CE.
//! - [`ec_block`]: classifier, label propagation, refinement rule.
//! - [`data`]: synthetic embeddings, Dirichlet partitions, noise injection, CSV ingestion.
//! - [`federation`]: client training, prototype and parameter aggregation, round loop.
//! - [`harness`]: configuration, CLI orchestration, sweeps and summaries.

pub mod data;
pub mod ec_block;
pub mod error;
pub mod federation;
pub mod harness;
pub mod hypergraph;
pub mod numcore;
pub mod ue_block;

pub use error::{Error, Result};
