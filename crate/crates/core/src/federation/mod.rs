//! Federated training across width-scaled clients.

mod aggregate;
mod clients;
mod hifi;
mod server;
mod strategy;
mod train;

pub use aggregate::{aggregate_basis, aggregate_scale_factors, mean_tensors};
pub use clients::{cluster_clients, round_robin_resources, sample_participants, ClientState, Clustering};
pub use hifi::{check_fusion_ranks, expand_ranks, hifi_fuse, select_fusion_layer, TuckerModes};
pub use server::{distribute_global, ScaleModel, ServerState};
pub use strategy::{
    baseline_fedavg_round, run_round, run_round_with, FederationStrategy, PerScaleFedAvg, RoundContext,
    RoundMetrics, RoundStep, SFedHifi, ScaleMetrics, StrategyRegistry,
};
pub use train::{evaluate, local_train, Evaluation, LocalUpdate, TrainingSettings};
