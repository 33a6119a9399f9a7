pub mod checks;
pub mod dataset;
pub mod error;
pub mod likelihood;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
