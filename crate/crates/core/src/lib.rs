//! Pole-anchored place recognition: synthetic LiDAR scenes, pole detection,
//! polar occupancy images, a small convolutional encoder trained with
//! contrastive or supervised objectives, and cross-session retrieval
//! evaluation.

pub mod cloud;
pub mod detect;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod image;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
