//! Text-guided diffusion-feature segmentation.

pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod rng;
pub mod seg;
pub mod text;

pub use error::{Error, Result};
