//! Layout-guided inpainting of indoor equirectangular panoramas.

pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
