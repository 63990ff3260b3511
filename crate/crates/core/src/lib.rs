//! Quantized neural network engine built on bit-serial activations.
//!
//! A k-bit activation is split into k binary planes that propagate through
//! the network independently while sharing weights, so every inner product
//! reduces to packed AND/XNOR + popcount kernels. The crate provides the
//! dense reference substrate, the packed kernels, the quantization math
//! with straight-through training, model (de)serialization, and a CPU
//! benchmark harness comparing packed kernels against the FP32 baseline.

pub mod bitplane;
pub mod bench;
pub mod cli;
pub mod binlinalg;
pub mod error;
pub mod model_io;
pub mod data;
pub mod net;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
