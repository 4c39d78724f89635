//! Alpha compositing and background fitting.

use crate::error::{MatteError, Result};
use crate::plane::Plane;
use crate::resample::Resampler;
use crate::tensor::Real;

/// `I = α F + (1 − α) B`, per pixel and channel.
pub fn composite<T: Real>(fg: &Plane<T>, bg: &Plane<T>, alpha: &Plane<T>) -> Result<Plane<T>> {
    if fg.dims() != bg.dims() || fg.dims() != alpha.dims() || alpha.channels() != 1 || fg.channels() != bg.channels() {
        return Err(MatteError::ShapeMismatch(format!(
            "fg {}x{:?}, bg {}x{:?}, alpha {}x{:?}",
            fg.channels(),
            fg.dims(),
            bg.channels(),
            bg.dims(),
            alpha.channels(),
            alpha.dims()
        )));
    }
    let a = alpha.data();
    let hw = a.len();
    Plane::from_fn(fg.channels(), fg.height(), fg.width(), |c, y, x| {
        let i = y * fg.width() + x;
        let f = fg.data()[c * hw + i];
        let b = bg.data()[c * hw + i];
        a[i] * f + (T::one() - a[i]) * b
    })
}

/// Scales `bg` (bilinear) so it covers `h x w`, then centre-crops.
pub fn fit_background<T: Real>(bg: &Plane<T>, h: usize, w: usize) -> Plane<T> {
    let (bh, bw) = bg.dims();
    if (bh, bw) == (h, w) {
        return bg.clone();
    }
    let scale = (h as f64 / bh as f64).max(w as f64 / bw as f64);
    let (sh, sw) = (((bh as f64 * scale).ceil() as usize).max(h), ((bw as f64 * scale).ceil() as usize).max(w));
    let resized = Resampler::bilinear((bh, bw), (sh, sw)).apply(bg.channels(), bg.data());
    let resized = Plane::new(bg.channels(), sh, sw, resized).expect("resampled values are finite");
    resized.crop((sh - h) / 2, (sw - w) / 2, h, w).expect("crop inside")
}
