pub mod blocks;
pub mod complexity;
pub mod config;
pub mod error;
pub mod losses;
pub mod spectral;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
