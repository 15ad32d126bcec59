//! Physics-attention field solver.

pub mod cache;
pub mod complexity;
pub mod counters;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod model;
pub mod physattn;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{Matrix, Real, Rng};
