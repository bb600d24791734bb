//! Porosity- and depth-conditioned pore-image synthesis and validation.

pub mod cgan;
pub mod checkpoint;
pub mod config;
pub mod dataprep;
pub mod error;
pub mod morphology;
pub mod petro;
pub mod pipeline;
pub mod plots;
pub mod raster;
pub mod segmentation;
pub mod stats;

pub use error::{Error, Result};
