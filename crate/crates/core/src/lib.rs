pub mod arcface;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod embedding;
mod error;
pub mod model;
pub mod retrieval;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
