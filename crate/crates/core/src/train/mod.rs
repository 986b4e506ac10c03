//! Shared training machinery: named parameters and the AdamW optimizer.

mod optim;
mod params;

pub use optim::{AdamW, AdamWConfig, OptimizerState};
pub use params::{Binding, ParamStore};
