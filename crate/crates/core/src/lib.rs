//! Quantized ensemble distillation for time series classifiers.
pub mod autodiff;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod mobo;
pub mod models;
pub mod space;
pub mod synthetic;
pub mod teachers;
mod training;

pub use error::{Error, Result};
