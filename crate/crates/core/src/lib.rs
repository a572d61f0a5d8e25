//! Unsupervised change detection for coregistered SAR image pairs.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`diff::log_ratio`] turns two intensity images into a difference image.
//! 2. [`preclassify::hierarchical_fcm`] clusters it into confident changed,
//!    confident unchanged and intermediate pixels.
//! 3. [`patches::build_training_set`] cuts `3 x R x R` patches around the
//!    confident pixels, using their cluster as a pseudo-label.
//! 4. [`model::train`] fits a small convolutional network with layer
//!    attention on those patches under a noise-tolerant loss.
//! 5. [`model::predict_map`] classifies every pixel, and [`metrics`] scores
//!    the map against ground truth when one is available.
//!
//! [`synth`] generates speckled image pairs with known truth for testing.
//!
//! ```
//! use lantnet::{diff, preclassify, synth};
//!
//! let scene = synth::generate(&synth::SceneSpec { width: 32, height: 32, ..Default::default() })?;
//! let di = diff::log_ratio(&scene.i1, &scene.i2)?;
//! let labels = preclassify::hierarchical_fcm(&di)?;
//! assert_eq!(labels.dims(), (32, 32));
//! # Ok::<(), lantnet::Error>(())
//! ```

pub mod diff;
mod error;
pub mod metrics;
pub mod model;
pub mod patches;
pub mod preclassify;
pub mod raster;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/rasters.md")]
    mod rasters {}
    #[doc = include_str!("../../../book/src/preclassification.md")]
    mod preclassification {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
}
