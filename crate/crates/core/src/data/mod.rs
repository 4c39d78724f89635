//! Dataset synthesis, ingestion and augmentation.

pub mod augment;
pub mod composite;
pub mod dataset;
pub mod io;
pub mod synth;
pub mod trimap;

pub use augment::{augment, AugmentConfig, AugmentedSample};
pub use composite::{composite, fit_background};
pub use dataset::{ingest_dataset, Dataset};
pub use trimap::{dilate, erode, generate_trimap, trimap_with_kernels};

use crate::error::Result;
use crate::plane::Plane;

/// Foreground, background (already fitted to the foreground size) and alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct MattingSample {
    pub fg: Plane<f32>,
    pub bg: Plane<f32>,
    pub alpha: Plane<f32>,
}

impl MattingSample {
    pub fn composite(&self) -> Result<Plane<f32>> {
        composite(&self.fg, &self.bg, &self.alpha)
    }
}
