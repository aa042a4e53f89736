//! Camera localization against a point-cloud map with a pose-query
//! transformer.
//!
//! The pipeline renders a depth image from the map at a hypothesized pose,
//! encodes the camera image and the depth image into coarse feature maps,
//! correlates them into a partial cost volume, and lets a stack of
//! transformer decoder layers refine implicit pose queries that small heads
//! decode into relative 7D poses. Re-rendering at the refined pose and
//! repeating with finer-trained networks converges on the camera pose.
//!
//! Module map:
//!
//! - [`tensor`]: tensors with reverse-mode differentiation, parameters,
//!   checkpoints.
//! - [`geometry`]: quaternions, rigid transforms, pinhole projection.
//! - [`maprender`]: point maps, depth rendering, perturbations, mirroring,
//!   synthetic scenes and image formats.
//! - [`encoders`], [`correlation`], [`poet`]: the network.
//! - [`pipeline`]: loss, training, iterative localization and metrics.

pub mod correlation;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod maprender;
pub mod pipeline;
pub mod poet;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
