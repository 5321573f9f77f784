//! Spatial-projection-guided 2D-to-3D human pose lifting.
//!
//! The crate is organized bottom-up:
//!
//! - [`diff`]: tensors and reverse-mode differentiation
//! - [`skeleton`]: joint tree, bone lengths, forward kinematics, flipping
//! - [`camera`]: differentiable pinhole projection with lens distortion
//! - [`losses`]: training objectives and their weighted combination
//! - [`encoder`]: temporal dilated convolutional lifting network
//! - [`dataio`]: synthetic motion generation, the `SPG1` container, windowing
//! - [`trainer`]: Adam, learning-rate schedule, training loop, checkpoints
//! - [`evaluator`]: MPJPE / P-MPJPE, Procrustes, reports, ablations
//! - [`gradcheck`] and [`render`]: verification and visualization helpers

pub mod camera;
pub mod config;
pub mod dataio;
pub mod diff;
pub mod encoder;
mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod losses;
pub mod render;
pub mod skeleton;
pub mod trainer;

pub use error::{Error, Result};
