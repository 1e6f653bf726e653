//! Color-distortion prediction as a self-supervised pretext task.
//!
//! Images are distorted by one of four enhancement operators (color
//! balance, contrast, sharpness, brightness) followed by Gaussian noise, and
//! a small convolutional network learns to tell which operator was applied.
//! The crate covers the pixel math, seeded pseudo-label manifests, a
//! hand-written CNN with backprop, and the training and evaluation loops.

// `!(x > 0)` style tests are deliberate: NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod distortion;
pub mod error;
pub mod net;
pub mod numfmt;
pub mod pixel;
pub mod rng;
pub mod trainer;

pub use distortion::{distort, DistortionKind, DistortionParams, SamplerConfig};
pub use error::{Error, Result};
pub use pixel::{decode_ppm, encode_ppm, ImageBuffer};
