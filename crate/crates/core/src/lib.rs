//! Functional and timing simulator for transformer inference on a
//! hierarchical many-cluster accelerator.

pub mod cli;
pub mod error;
pub mod kernels;
pub mod machine;
pub mod models;
pub mod numerics;
pub mod par;
pub mod recipes;
pub mod scheduler;
pub mod tensor;
pub mod validate;

pub use error::{Error, Result};
pub use numerics::FloatFormat;
pub use tensor::Matrix;
