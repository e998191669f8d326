//! Ternary weight quantization with 8-bit fixed-point activations.
//!
//! The crate covers the whole flow: reading models, clustering and
//! ternarizing filters, recomputing batch-norm statistics, calibrating
//! activation formats, running the network with integer-only arithmetic,
//! counting the operations it replaced, and fine-tuning a small network with
//! a straight-through estimator.

pub mod engine;
pub mod error;
pub mod finetune;
pub mod fixed_point;
pub mod model_io;
pub mod par;
pub mod perf;
pub mod pipeline;
pub mod tensor;
pub mod ternarizer;

pub use error::{Error, Result};
pub use tensor::Tensor;
