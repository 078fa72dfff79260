//! Anchor-based face detection with a training-only super-resolution branch.

pub mod anchors;
pub mod cli;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod params;
pub mod sr_branch;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
