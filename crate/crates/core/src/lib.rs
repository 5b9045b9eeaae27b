pub mod checkpoint;
pub mod config;
pub mod coords;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod profile;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
