//! Multi-view X-ray synthesis from CT volumes.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rawfile;
pub mod train;
pub mod volume;
pub mod xray;

pub use error::{Error, Result};
