//! Joint reconstruction of a shared density field and two per-sensor color
//! fields from unregistered multiview image sets, with bundle-adjusted
//! camera poses.

pub mod cli;
pub mod dataset;
pub mod datastore;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod geometry;
pub mod raster;
pub mod renderer;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
