//! Street segmentation from driver-perspective photographs with small
//! patch-based convolutional networks.
//!
//! Two pipelines share the same machinery: a classifier that labels the
//! center pixel of each `n×n` patch (evaluated as a strided sliding window),
//! and a regressor that predicts the whole patch (evaluated by stitching
//! overlapping patches, each pixel owned by the nearest patch center).

pub mod dataset;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod patcher;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
