//! Meshfree exterior calculus on point clouds with learnable edge fluxes.

pub mod complex;
pub mod error;
pub mod experiments;
pub mod features;
pub mod flux;
pub mod geometry;
pub mod solver;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};
