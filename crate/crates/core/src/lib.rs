//! Iterative scene-flow estimation for 3D point clouds.
//!
//! A coarse all-to-all correlation stage produces an initial flow which a
//! weight-shared recurrent update unit then refines over several unrolled
//! iterations. Everything runs on a small tape-based differentiation engine
//! in `f64` so gradients can be checked against finite differences.

pub mod autodiff;
pub mod checks;
pub mod error;
pub mod geometry;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
