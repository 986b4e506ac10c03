//! Desk-scale masked-prediction speech pre-training with supervision at a
//! configurable set of transformer layers, plus the k-means pseudo-label
//! pipeline, CTC fine-tuning with shallow LM fusion, and cluster-quality
//! analysis.
//!
//! The numeric core is generic over the scalar type; the aliases below pin
//! the precision the pipeline runs at.

pub mod asr;
pub mod audio;
pub mod encoder;
pub mod errors;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod ssl;
pub mod tensor;
pub mod train;

pub use errors::{Error, Result};
pub use tensor::Var;

/// Precision every shipped pipeline runs at.
pub type Real = f64;

/// Tensor at pipeline precision.
pub type Tensor = tensor::Tensor<Real>;

/// Tape at pipeline precision.
pub type Tape = tensor::Tape<Real>;
