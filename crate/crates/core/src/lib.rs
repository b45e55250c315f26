//! Unified-vocabulary multimodal sequence-to-sequence modeling.

pub mod autograd;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod tokenization;
pub mod trainer;

pub use error::{Error, Result};
