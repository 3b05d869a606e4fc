pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod itb;
pub mod mask;
pub mod raster;
pub mod shape_prior;
pub mod tensor;

pub use config::Config;
pub use error::{Error, Result};
