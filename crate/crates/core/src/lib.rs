//! Refinement of coarse satellite NDVI rasters for row crops.
//!
//! A small inception/residual network is trained to map 3x3 neighbourhoods
//! of a satellite NDVI raster onto canopy-only NDVI derived from a single
//! high-resolution UAV survey. Refined maps are then split into three vigor
//! classes with k-means and checked with one-way ANOVA.

pub mod error;
pub mod nn;
pub mod patchset;
pub mod pipeline;
pub mod rarefynet;
pub mod raster;
pub mod stats;
pub mod synth;
pub mod train;
pub mod vigor;

pub use error::{Error, Result};
