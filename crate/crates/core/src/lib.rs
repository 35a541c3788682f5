//! Structure-aware interpretable classification.
//!
//! A U-Net style encoder–decoder is pretrained for layer segmentation, then
//! reused as the backbone of a classifier whose head fuses deep encoder
//! features with decoder features through a learnable scalar gate. CAM-family
//! attributions computed on the fused map are scored against layer masks.

pub mod attribution;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Result, SailError};
pub use tensor::Tensor;
