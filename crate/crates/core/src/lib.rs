//! Cross-view geo-localization backbone: a convolutional stem feeding a stack
//! of feed-forward-free multi-head self-attention layers, pooled into an
//! L2-normalized descriptor, together with the losses, synthetic data,
//! trainer and retrieval evaluator around it.

pub mod aggregation;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
