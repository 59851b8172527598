//! Masked generative vision-and-language modeling on a synthetic grid world.

pub mod config;
pub mod decode;
pub mod error;
pub mod eval;
pub mod mask;
pub mod model;
pub mod sampling;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
