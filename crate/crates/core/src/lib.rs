//! Trimap-based image matting with an adapted plain vision transformer.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod cost;
pub mod data;
pub mod detail;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod plane;
pub mod resample;
pub mod tensor;
pub mod trainer;

pub use error::{MatteError, Result};
