//! Spatio-temporal prompting for video transformers: a prompt predictor reads
//! encoder features of nearby support frames and emits prompt tokens that are
//! prepended to the current frame's patch tokens.

pub mod config;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod model;
pub mod numcore;
pub mod params;
pub mod predictor;
pub mod synthvid;

pub use error::{Error, Result};
