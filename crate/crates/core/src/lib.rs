//! Multi-spectral (visible + thermal) facial landmark detection.
//!
//! The pipeline stacks two U-Net based models: an auxiliary model that
//! predicts the face bounding box, and a main model that predicts 68
//! landmark coordinates from the image with everything outside that box
//! blacked out. Both models are trained in two stages: the U-Net first
//! learns a mask target, then it is frozen and a fully connected head learns
//! the coordinates.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod face;
pub mod kernels;
pub mod landmarks;
pub mod manifest;
pub mod masks;
pub mod model;
pub mod raster;
pub mod training;

pub use error::{Error, Result};
pub use face::{FaceImage, Spectrum, Variation};
pub use landmarks::{flip_permutation, BoundaryBox, LandmarkSet, Point, FLAT_LEN, NUM_POINTS};
pub use manifest::SampleRecord;
pub use masks::Mask;

/// Side length of the square network input.
pub const INPUT_SIZE: usize = 128;
