pub mod error;
pub mod field;
pub mod math;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod recombiner;
pub mod sampler;
pub mod scene;

pub use error::{Error, Result};
