//! Whole-body mobile-manipulation control with reduced, manipulability-aware
//! quadratic programming, a small conditional diffusion goal source, and a
//! deterministic kinematic benchmark harness.

pub mod control;
pub mod diffusion;
pub mod error;
pub mod kinematics;
pub mod qp;
pub mod se3;
pub mod sim;

pub use error::{Error, Result};
