//! Moving object segmentation from per-pixel temporal histograms.

pub mod error;
pub mod eval;
pub mod hist;
pub mod didl;
pub mod distlayer;
pub mod nn;
pub mod real;
pub mod sbr;
pub mod videoio;

pub use error::{Error, Result};
pub use real::Real;
