//! End-to-end post-training quantization for small vision transformers.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod kernels;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod prompt;
pub mod ptq;
pub mod quantizer;
pub mod reparam;
pub mod tape;
pub mod teacher;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
