//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("loss became non-finite at step {step} (lr {lr:e})")]
    NonFiniteLoss { step: usize, lr: f64 },

    #[error("waveform too short: need at least {needed} samples, got {got}")]
    WaveformTooShort { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("mask index {index} out of range for {len} frames")]
    MaskOutOfRange { index: usize, len: usize },

    #[error("cosine similarity undefined: zero-norm {what}")]
    ZeroNorm { what: String },

    #[error("target label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("k-means needs at least {clusters} points, got {points}")]
    TooFewPoints { points: usize, clusters: usize },

    #[error("{what}: dimension mismatch, expected {expected}, got {got}")]
    DimMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("layer {layer} out of range: model has {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("length mismatch between {what}: {lhs} vs {rhs}")]
    LengthMismatch {
        what: String,
        lhs: usize,
        rhs: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("checkpoint tensor {name:?}: expected shape {expected:?}, got {got:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("checkpoint config fingerprint {found} does not match expected {expected} (use force to override)")]
    FingerprintMismatch { expected: String, found: String },

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
