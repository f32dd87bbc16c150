//! Declarative experiment runner: configuration, metrics and checkpoints.

mod checkpoint;
mod config;
mod metrics;
mod runner;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION,
};
pub use config::{
    parse_config, DatasetConfig, DatasetKind, ExperimentConfig, FederationConfig, ModelConfig, PartitionConfig,
    PartitionKind, TrainingConfig, DATA_ROOT_ENV,
};
pub use metrics::{emit_metrics, format_rows, MetricsSink, METRICS_HEADER};
pub use runner::{
    hex, render_energy, run_experiment, run_experiment_with, Experiment, RunOptions, RunSummary, CHECKPOINT_FILE, MANIFEST_FILE, METRICS_FILE,
};
