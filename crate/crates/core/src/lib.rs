//! Multi-scale graph attention network for removing compression artifacts
//! from point cloud color attributes.
//!
//! Blocks of a decoded cloud are filtered by Chebyshev graph convolutions
//! and quantization-step-weighted graph attention at three resolutions; a
//! residual head predicts the correction for one YUV component.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod training;

pub use error::{Error, PlyErrorKind, Result};
pub use geometry::{Block, PointCloud};
pub use model::{build_model, Component, ModelConfig, ModelParams, RestorationModels};
pub use training::{TrainConfig, TrainSample};
