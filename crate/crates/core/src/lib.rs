pub mod affinity;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck_suite;
pub mod hosts;
pub mod params;
pub mod patch_grid;
pub mod pipeline;
pub mod probe;
pub mod raster;
pub mod resample;
pub mod synth;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
