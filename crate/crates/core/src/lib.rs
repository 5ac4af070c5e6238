//! Extremely low-bit transformer toolkit: 1-bit linear layers with routed
//! INT8 branches, quantization-aware training from scratch, weight
//! sensitivity analysis and a packed lookup-table inference path.

mod binio;
pub mod config;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod quant;
pub mod sensitivity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::FloatMatrix;
