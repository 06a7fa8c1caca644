//! Multi-scale spectrally gated state-space forecasting.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod kernels;
pub mod model;
pub mod params;
pub mod patch;
pub mod spectral;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::AsgMamba;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
