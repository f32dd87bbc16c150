//! Spiking network engine.

mod arch;
mod lif;
mod loss;
mod network;
mod optim;

pub use arch::{Architecture, ComputeLayer, ConvSlot, InputShape, LayerSpec, LayerString, NetworkPlan, Stage};
pub use lif::{lif_step, surrogate_grad, surrogate_step, LifParams, LifState};
pub use loss::{orthogonality_penalty, orthogonality_penalty_grads, tet_loss, tet_loss_and_grad};
pub use network::{
    argmax_mean_logits, record_firing_rates, DenseGrads, FiringRateReport, HiddenWeight, NetworkParams,
    Parameterization, RateAccumulator, SpikeMode, SpikingNetwork, Trace,
};
pub use optim::{optimizer_step, Sgd};
