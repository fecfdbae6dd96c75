//! Multi-scale spatio-temporal flow (MSTF) for small-object video detection.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors and the handful of differentiable kernels
//!   (convolution, bilinear sampling, gated recurrent cell, upsampling) with
//!   hand-written backward passes and a finite-difference checker.
//! - [`correlation`]: all-pairs inter-frame correlation volumes between every
//!   pair of pyramid levels.
//! - [`mstf`]: flow-guided lookup over the correlation pyramid, the recurrent
//!   feature/flow update and the per-stream flow state.
//! - [`detector`]: a small anchor-free three-scale detector hosting the MSTF
//!   neck, with loss, training loop, decoding and NMS.
//! - [`evaluation`]: COCO-style AP with small-object size buckets.
//! - [`dataset`]: annotation schema, statistics, tiling, keyframe
//!   interpolation, clip-level augmentation and a synthetic video generator.
//! - [`experiment`]: the desk-scale ablation harness (static baseline vs MSTF).

pub mod correlation;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod geometry;
pub mod mstf;
pub mod numerics;

pub use error::{Error, Result};

/// Version of the crate, printed by the CLI next to the format versions.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
