//! Masked space-time hash encoding for dynamic scene reconstruction.

pub mod container;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod grid;
pub mod hashgrid;
pub mod losses;
pub mod model;
pub mod nn;
pub mod real;
pub mod sampler;
pub mod render;
pub mod scene;
pub mod train;
pub mod sh;

pub use error::{Error, Result};
pub use real::Real;
