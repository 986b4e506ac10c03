//! Self-supervised objective: span masking, per-layer prediction heads and
//! the masked-prediction loss over the supervised layer set, plus the
//! pre-training loop.

pub mod heads;
pub mod loss;
pub mod mask;
pub mod pretrain;

pub use heads::{HeadConfig, SupervisedLayers};
pub use mask::MaskSpec;
