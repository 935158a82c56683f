//! Per-profile mask tensors that select and aggregate a frozen bank of
//! bottleneck adapters, plus the small tensor, autodiff and transformer
//! stack they run on.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix it
//! to `f32`, which is what the command-line tools use.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod codec;
pub mod config;
pub mod error;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod sim;
pub mod tensor;
pub mod train;

pub use autodiff::Var;
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f32>;
pub type Tape = autodiff::Tape<f32>;
pub type Backbone = backbone::Backbone<f32>;
pub type AdapterBank = adapter::AdapterBank<f32>;
pub type MaskTensors = adapter::MaskTensors<f32>;
pub type Head = model::Head<f32>;
pub type Model = model::Model<f32>;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
