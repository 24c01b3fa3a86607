pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod graphgen;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod reasonet;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
