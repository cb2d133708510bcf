pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod error;
pub mod gaussian;
pub mod nn;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod segments;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
