//! Binary neural networks trained with backpropagation and with local,
//! update-unlocked alternatives, plus bit-packed inference.

pub mod algorithms;
pub mod binarize;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod optim;
pub mod packed;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{build_model, ArchSpec, Architecture, ModelGraph};
pub use scalar::Scalar;
pub use tensor::{Rng, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = ModelGraph<f32>;
pub type Model64 = ModelGraph<f64>;
