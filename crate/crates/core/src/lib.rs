//! Training networks whose neurons end up communicating in single bits.
//!
//! Networks are trained with bounded-ReLU activations that are gradually
//! sharpened, layer by layer from the input upward, until every activation is
//! a step function at 0.5. The trained network can then have its batch
//! normalization folded into the weights, its parameters rounded to
//! fixed-point, and be exported to a framework-free spiking model that an
//! integrate-and-threshold runtime evaluates with binary messages only.
//!
//! - [`tensor`]: dense `f32` tensors with forward/backward operation pairs
//! - [`network`]: sequential layer graph, batch normalization, save/load
//! - [`activation`]: the sharpening bounded ReLU
//! - [`sharpen`]: programmed and adaptive sharpening schedules
//! - [`encoding`]: N-hot output coding and population decoding
//! - [`optim`]: SGD, Adam, Adamax, Adadelta, RMSprop
//! - [`deploy`]: batch-norm folding, fixed-point quantization, spiking export
//! - [`runtime`]: event-driven single-timestep spiking inference
//! - [`metrics`]: Gini coefficient, activity profiles, dead-node census
//! - [`data`]: IDX dataset loading
//! - [`experiment`]: configs, presets and the training pipeline

pub mod activation;
mod container;
pub mod data;
pub mod deploy;
pub mod encoding;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod runtime;
pub mod sharpen;
pub mod tensor;

pub use activation::Sharpness;
pub use container::BlobEntry;
pub use encoding::NHotCode;
pub use error::{Error, Result};
pub use network::{Layer, LayerSpec, Mode, Network, NetworkConfig};
pub use tensor::Tensor;
