//! QuadFormer: a quadruple self/cross-attention transformer for unsupervised
//! domain-adaptive binary segmentation of thin power lines.

pub mod adaptation;
pub mod autograd;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kv;
mod kernels;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod verify;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Binder, ParamId, ParamStore};
pub use scalar::Real;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
