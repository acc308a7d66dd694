//! Layer-aware regression heads on a small decoder-only transformer for
//! reference-free translation quality estimation.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below fix the common choices.

pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod lora;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod train;
pub mod transformer;

pub use autodiff::{Graph, NodeId, Tensor};
pub use binio::write_atomic;
pub use error::{AlopeError, Result};
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = transformer::TransformerModel<f32>;
pub type Model64 = transformer::TransformerModel<f64>;
pub type Heads32 = heads::Heads<f32>;
pub type Heads64 = heads::Heads<f64>;
pub type Regressor32 = train::Regressor<f32>;
pub type Regressor64 = train::Regressor<f64>;
