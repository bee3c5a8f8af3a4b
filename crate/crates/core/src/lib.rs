//! Spatio-temporal graph forecasters (single- and multi-scale TCN variants)
//! for multi-station hourly weather series, with the data pipeline, training loop and
//! evaluation tooling around them.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::TensorError;
pub use tensor::Tensor;
