//! Scanner model identification from scanned images, and localization of
//! spliced regions through per-pixel reliability maps.
//!
//! The pipeline: [`synthscan`] renders device-fingerprinted scans, [`dataio`]
//! and [`tiling`] turn images into labelled patches, [`trainer`] fits the
//! [`net`] patch classifier, [`classify`] votes per image, [`relmap`] builds
//! dense reliability maps and [`forge`] makes and scores splices.

pub mod classify;
pub mod dataio;
pub mod error;
pub mod exec;
pub mod forge;
pub mod net;
pub mod relmap;
pub mod seed;
pub mod synthscan;
pub mod tiling;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
