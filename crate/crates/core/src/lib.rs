//! Weather synthesis, weather priors, the adaptation detector and its trainer.

pub mod error;
pub mod filter;
pub mod image;
pub mod models;
pub mod priors;
pub mod sample;
pub mod stats;
pub mod trainer;
pub mod weathersim;

pub use error::{CoreError, Result};
pub use image::{DepthMap, ImageF};
pub use sample::{BBox, DetectionSample};
