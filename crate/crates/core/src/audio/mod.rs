//! Audio frontend: synthetic corpus generation, MFCC extraction and the
//! convolutional feature encoder.

pub mod corpus;
pub mod frontend;
pub mod mfcc;
pub mod synth;

use crate::errors::{Error, Result};
use crate::Real;

/// Fixed sample rate of the whole pipeline.
pub const SAMPLE_RATE: usize = 16_000;

/// Raw audio at 16 kHz, samples in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Waveform {
    samples: Vec<Real>,
}

impl Waveform {
    pub fn new(samples: Vec<Real>) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::NonFinite {
                context: "waveform samples must be finite and within [-1, 1]".into(),
            });
        }
        Ok(Waveform { samples })
    }

    pub fn samples(&self) -> &[Real] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> usize {
        SAMPLE_RATE
    }

    pub fn duration_ms(&self) -> usize {
        self.samples.len() * 1000 / SAMPLE_RATE
    }
}

/// Where a feature matrix came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Mfcc,
    ConvEncoder,
    TransformerLayer(usize),
}

/// Time-major frame matrix with frame-rate metadata.
#[derive(Clone, Debug)]
pub struct FeatureSequence {
    frames: crate::Tensor,
    frame_stride_ms: Real,
    source: FeatureSource,
}

impl FeatureSequence {
    pub fn new(frames: crate::Tensor, frame_stride_ms: Real, source: FeatureSource) -> Result<Self> {
        if frames.shape().len() != 2 || frames.shape()[0] == 0 {
            return Err(Error::EmptyInput("feature sequence needs at least one frame".into()));
        }
        Ok(FeatureSequence {
            frames,
            frame_stride_ms,
            source,
        })
    }

    pub fn frames(&self) -> &crate::Tensor {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame_stride_ms(&self) -> Real {
        self.frame_stride_ms
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn row(&self, t: usize) -> &[Real] {
        let d = self.dim();
        &self.frames.data()[t * d..(t + 1) * d]
    }
}
