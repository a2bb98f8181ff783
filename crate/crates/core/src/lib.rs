//! Detection of dermoscopic features as a four-class segmentation problem.
//!
//! Expert annotations arrive as per-superpixel binary label vectors. They are
//! painted into a four-channel mask, a hypercolumn fully-convolutional network
//! is trained against that mask with a smoothed F1 loss, and its pixel
//! probabilities are averaged back onto superpixels for AUROC scoring.
//!
//! Everything runs on a small dense `f64` tensor kernel set in [`tensor`],
//! with hand-written backward passes checked against finite differences.

pub mod data;
mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod selfcheck;
pub mod superpixel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use superpixel::{Class, FeatureMask, LabelMatrix, SuperpixelMap, SuperpixelScores};
pub use tensor::Tensor;
