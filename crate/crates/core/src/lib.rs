//! Joint keypoint detection and description for cross-modal image matching.
//!
//! The crate trains a network that maps an image of a given modality to a
//! dense map of unit-norm 128-dimensional descriptors and a detection score
//! map, and evaluates the resulting features with a matching and homography
//! registration benchmark.
//!
//! - [`geometry`]: homography sampling, warping and ground-truth correspondences.
//! - [`model`]: modality adapters, shared encoder and the two-branch detector.
//! - [`losses`]: description, repeatability and peaking objectives with
//!   detached mutual weights, plus the naive coupled baseline.
//! - [`training`]: data pipeline, synthetic modalities, Adam schedule, loop.
//! - [`features`]: keypoint selection and mutual nearest-neighbour matching.
//! - [`benchmark`]: RR / MS / RANSAC registration / SRR evaluation.
//!
//! Differentiation runs on a small tape ([`autograd`]) whose image operations
//! live in [`nn`].

pub mod autograd;
pub mod benchmark;
pub mod dataset;
pub mod error;
pub mod features;
pub mod geometry;
pub mod gradcheck;
pub mod image_io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use crate::autograd::{Graph, Var};
pub use crate::error::{Error, Result};
pub use crate::tensor::{Scalar, Tensor};
