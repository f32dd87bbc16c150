//! Heterogeneous spiking federated learning.
//!
//! Clients train width-scaled spiking networks whose convolution weights are
//! factorized into a shared basis and per-scale factors. The server averages
//! the basis across all clients, averages factors within each scale, and then
//! fuses the most active layer across scales through a Tucker decomposition
//! whose core tensors are averaged.

pub mod data;
pub mod energy;
pub mod error;
pub mod experiment;
pub mod rng;
pub mod snn;
pub mod factorized;
pub mod federation;
pub mod tensor;

pub use error::{Error, Result};
