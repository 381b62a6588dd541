pub mod ablation;
pub mod config;
pub mod data;
pub mod error;
pub mod lrb;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod text;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
