//! Simulation of elastic objects represented as clouds of Gaussian kernels.
//!
//! Kernels are grouped bottom-up into Center-of-Mass Systems (CMS). Each step a
//! deformation-gradient provider predicts one polar-factored gradient per CMS at
//! levels `1..=L`; the gradients are applied coarse-to-fine against the
//! material-space template to produce kernel positions, covariances and color
//! rotations.

pub mod bench;
pub mod constraints;
pub mod deformation;
pub mod engine;
mod error;
pub mod grid;
pub mod hierarchy;
pub mod io;
pub mod projection;
pub mod propagation;
pub mod providers;
pub mod splat;
pub mod synth;
pub mod validate;

pub use error::{Error, Result};

/// Position / direction vector in scene units.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3×3 matrix (covariances, gradients, rotations).
pub type Mat3 = nalgebra::Matrix3<f64>;
