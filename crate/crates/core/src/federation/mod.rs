//! Clients, server and the round loop.
//!
//! A client holds a full model; everything except the uncertainty estimator
//! is uploaded and averaged. The server also averages per-class prototypes
//! of the expression features.

mod client;
mod experiment;
mod metrics;
mod params;
mod prototypes;
mod server;

pub use client::{
    accuracy, batch_step, batches, expression_features, local_prototypes, local_train, predict, BatchStep,
    ClientState, LocalReport, Method, PropagationScope, TrainConfig,
};
pub use experiment::{selected_count, Checkpoint, ClientCheckpoint, Federation, FederationConfig, RoundOutcome};
pub use metrics::{
    read_metrics, MetricsRow, MetricsWriter, AGGREGATE_CLIENT, METRICS_HEADER, SPLIT_LOCAL, SPLIT_POOLED,
};
pub use params::{ModelDims, ModelParams, TensorGroup};
pub use prototypes::{compute_prototypes, prototype_loss, PrototypeDistance, PrototypeLoss, Prototypes};
pub use server::{aggregate, aggregation_weights, ClientUpdate, ServerState, Weighting};
