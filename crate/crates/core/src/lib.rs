//! Sparse-view neural radiance field toolkit.

pub mod error;
pub mod eval;
pub mod fields;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod mpi;
pub mod optim;
pub mod priors;
pub mod render;
pub mod scenes;

pub use error::{Error, Result};
