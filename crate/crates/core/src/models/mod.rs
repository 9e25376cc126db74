//! Student classifiers: settings, weight quantization, exact sizing and checkpoints.

mod checkpoint;
mod network;
mod quant;
mod setting;

pub use checkpoint::{Checkpoint, NamedTensor, FORMAT_VERSION};
pub use network::{
    argmax, batch_tensor, build_student, forward_classify, model_size_bits, ConvLayer,
    ForwardVars, StudentNetwork, DEFAULT_FILTERS,
};
pub use quant::{calibrate_quantspec, quantize, QuantSpec, Quantized};
pub use setting::{BlockSetting, StudentSetting, BIT_CHOICES, FILTER_CHOICES, LAYER_CHOICES};
