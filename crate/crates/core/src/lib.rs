//! Masked mixture-of-experts for cross-domain iris anti-spoofing, at desk scale.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod image;
pub mod metrics;
pub mod moe;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{GrayImage, Label};
