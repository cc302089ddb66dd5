//! Post-training chain: fold batch normalization into the weights, round
//! parameters to fixed point, and export a framework-free spiking model.

mod fold;
mod quantize;
mod spiking;

pub use fold::fold_batchnorm;
pub(crate) use quantize::csv_err;
pub use quantize::{quantize_weights, QFormat, QuantReport, QuantRow};
pub use spiking::{
    export_spiking, SpikingLayer, SpikingModel, INPUT_ENCODING, SPIKING_MAGIC, SPIKING_VERSION, THRESHOLD,
};
