mod binio;
pub mod checkpoint;
pub mod datapipe;
pub mod error;
pub mod extraction;
pub mod image;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
