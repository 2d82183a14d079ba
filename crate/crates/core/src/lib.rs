//! Audio-visual scene classification toolkit.

pub mod audio;
pub mod cli;
pub mod data;
pub mod error;
pub mod image_ops;
pub mod models;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
