pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod sampler;
pub mod trainer;
pub mod translator;

pub use error::{Error, Result};
