//! Correlated time-series forecasting with lightweight temporal and
//! spatial operator stacks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: f64 tensors and a reverse-mode operation tape
//! - [`data`]: dataset container, file formats, windowing, normalization
//! - [`ltcn`]: gated temporal convolution stack and last-shot compression
//! - [`glformer`]: global/local attention blocks over node embeddings
//! - [`model`]: full forecasting model, parameter registry, checkpoints
//! - [`training`]: Adam, the training loop, evaluation metrics
//! - [`profiler`]: exact parameter and FLOP accounting

pub mod data;
pub mod glformer;
pub mod ltcn;
pub mod model;
pub mod profiler;
pub mod tensor;
pub mod training;

/// A model or pipeline configuration violated a structural constraint.
/// The message names the constraint that failed.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);
