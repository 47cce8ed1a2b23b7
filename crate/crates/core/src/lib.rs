//! Quantization-aware training with trainable quantization intervals and
//! three-phase knowledge distillation (self-studying, co-studying,
//! tutoring), plus the baselines it is compared against.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod quant;
pub mod tensor;

pub use error::{QkdError, Result};
pub use tensor::Tensor;
