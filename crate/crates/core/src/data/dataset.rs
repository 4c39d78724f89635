//! Directory datasets: `root/{fg,alpha,bg}/*.{png,jpg,jpeg}`.
//!
//! Files are sorted by name. The i-th foreground pairs with the i-th alpha.
//! Foreground `i` is composited with backgrounds `(i * B + j) mod n_bg` for
//! `j < B`, where `B` (`bg_per_fg`) defaults to the number of backgrounds.

use std::path::{Path, PathBuf};

use super::composite::fit_background;
use super::io::{load_gray, load_rgb};
use super::MattingSample;
use crate::error::{MatteError, Result};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub fg: Vec<PathBuf>,
    pub alpha: Vec<PathBuf>,
    pub bg: Vec<PathBuf>,
    pub bg_per_fg: usize,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(MatteError::MissingDirectory(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Indexes a dataset directory; images are loaded lazily.
pub fn ingest_dataset(root: &Path) -> Result<Dataset> {
    let fg = list_images(&root.join("fg"))?;
    let alpha = list_images(&root.join("alpha"))?;
    let bg = list_images(&root.join("bg"))?;
    if fg.len() != alpha.len() {
        return Err(MatteError::Config(format!("{} foregrounds but {} alphas", fg.len(), alpha.len())));
    }
    if !fg.is_empty() && bg.is_empty() {
        return Err(MatteError::Config(format!("{} has no backgrounds", root.join("bg").display())));
    }
    let bg_per_fg = bg.len();
    Ok(Dataset { root: root.to_path_buf(), fg, alpha, bg, bg_per_fg })
}

impl Dataset {
    pub fn with_bg_per_fg(mut self, b: usize) -> Self {
        self.bg_per_fg = b.max(1);
        self
    }

    pub fn len(&self) -> usize {
        self.fg.len() * self.bg_per_fg
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(foreground index, background index)` of sample `k`.
    pub fn pair(&self, k: usize) -> (usize, usize) {
        let (i, j) = (k / self.bg_per_fg, k % self.bg_per_fg);
        (i, (i * self.bg_per_fg + j) % self.bg.len())
    }

    pub fn load(&self, k: usize) -> Result<MattingSample> {
        let (i, b) = self.pair(k);
        let fg = load_rgb(&self.fg[i])?;
        let alpha = load_gray(&self.alpha[i])?;
        if fg.dims() != alpha.dims() {
            return Err(MatteError::ShapeMismatch(format!(
                "{} is {:?} but {} is {:?}",
                self.fg[i].display(),
                fg.dims(),
                self.alpha[i].display(),
                alpha.dims()
            )));
        }
        let (h, w) = fg.dims();
        let bg = fit_background(&load_rgb(&self.bg[b])?, h, w);
        Ok(MattingSample { fg, bg, alpha })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<MattingSample>> + '_ {
        (0..self.len()).map(|k| self.load(k))
    }
}
