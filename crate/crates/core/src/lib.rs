pub mod bottleneck;
pub mod container;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod runtime;
pub mod scoring;
pub mod synthetic;

pub use error::{Error, Result};
