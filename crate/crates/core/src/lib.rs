//! Dual-encoder contrastive representation learning with a hard attention
//! mask, plus clustering evaluation and mixture-model outlier detection.

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
