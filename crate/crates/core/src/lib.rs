//! Weakly supervised image classification and segmentation with
//! attention-based multiple instance learning.
//!
//! Images become bags of square patches; a CNN embeds each patch, an
//! attention network weighs them, and the weighted mean feeds a binary
//! classifier trained from image-level labels only. At test time the
//! attention weights of a dense patch grid are accumulated into a heatmap
//! whose thresholded form is the segmentation.

pub mod dataset;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod patchbag;
pub mod training;

pub use error::{Error, Result};
