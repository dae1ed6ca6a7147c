//! Audio-driven talking-face synthesis: audio-to-landmark generation and
//! landmark-to-face rendering, with training, inference and evaluation.

pub mod audio;
pub mod encoders;
pub mod error;
pub mod generator;
pub mod image_io;
pub mod landmarks;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod render;
pub mod synth;

pub use error::{Error, Result};
