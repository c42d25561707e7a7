//! Graph capsule networks.
//!
//! Primary capsules from a conv stack are projected per capsule, arranged
//! as one spatial graph per head, and pooled into class capsules by
//! attention over graph nodes. The crate also carries the training loop,
//! explanation and perturbation metrics, FGSM robustness sweeps, and the
//! file formats (IDX input, binary checkpoints, key-value configs).

pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod export;
pub mod interpret;
pub mod kv;
pub mod model;
pub mod rng;
pub mod trainer;

pub use config::{Aggregation, ConvSpec, ModelConfig};
pub use error::{Error, Result};
pub use model::{CapsNet, ParamSet};
