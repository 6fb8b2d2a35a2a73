//! Point-cloud visibility and rasterization for LiDAR scene maps.
//!
//! The pipeline accumulates LiDAR scans into a map ([`ingest`]), links each
//! posed camera frame to a window of nearby scans ([`connectivity`]), prunes
//! that window to the points visible from a query pose, and rasterizes them
//! into a multi-resolution pyramid ([`raster`]) that a renderer turns into an
//! RGB image ([`render`]).

pub mod bench;
pub mod binio;
pub mod cli;
pub mod connectivity;
pub mod error;
pub mod geom;
pub mod image;
pub mod ingest;
pub mod losses;
pub mod raster;
pub mod render;
pub mod synth;
mod zbuffer;

pub use error::{Error, Result};
