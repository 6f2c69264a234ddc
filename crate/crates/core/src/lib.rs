pub mod commands;
pub mod data;
pub mod error;
pub mod memcost;
pub mod metrics;
pub mod model;
pub mod patching;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod zblock;

pub use error::{Error, Result};
