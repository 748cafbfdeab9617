pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
