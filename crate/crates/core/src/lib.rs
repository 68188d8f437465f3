#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod consistency;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod eval;
pub mod network;
pub mod scalar;
pub mod schedules;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, ParamStore};
pub use error::{Error, Result};
pub use network::Model;
pub use scalar::Real;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
