//! Omni-relational high-order transformer for person re-identification.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode autodiff tape, and a
//!   finite-difference gradient oracle.
//! - [`params`]: named parameter storage bound onto a graph per forward pass.
//! - [`attention`]: scaled dot-product and multi-head self-attention with
//!   attention-weight capture.
//! - [`lrp`]: local relation perception, the stride-2 deformable plus
//!   depthwise convolution bridge between attention orders.
//! - [`ohformer`]: the high-order layer with optional prior-mixing score
//!   sharing and the fusion feed-forward network.
//! - [`model`]: stem, token stack, part pooling, and BNNeck heads.
//! - [`data`]: PPM image sets listed by a manifest.
//! - [`training`]: losses, PK sampling, augmentation, SGD, checkpoints.
//! - [`evaluation`]: CMC/mAP, JS-divergence attention analysis, and the
//!   synthetic pedestrian dataset.
//! - [`cli`]: the `ohformer` command-line entry point.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod lrp;
pub mod model;
pub mod ohformer;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
