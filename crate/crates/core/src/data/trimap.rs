//! Square-element morphology and dilation/erosion trimap synthesis.

use rand::Rng;

use crate::plane::{Plane, SeededRng};
use crate::tensor::Real;

/// Structuring-element size: `k` rounded up to odd, at least 1.
pub fn odd_kernel(k: usize) -> usize {
    k.max(1) | 1
}

/// Separable min/max filter of a binary mask with a square `k x k`
/// element (after rounding `k` to odd) and replicate border.
fn morph(mask: &[bool], h: usize, w: usize, k: usize, erode: bool) -> Vec<bool> {
    let r = (odd_kernel(k) / 2) as isize;
    let pass = |src: &[bool], along_x: bool| -> Vec<bool> {
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = erode;
                for d in -r..=r {
                    let (yy, xx) = if along_x {
                        (y, (x as isize + d).clamp(0, w as isize - 1) as usize)
                    } else {
                        ((y as isize + d).clamp(0, h as isize - 1) as usize, x)
                    };
                    let v = src[yy * w + xx];
                    if erode {
                        acc &= v;
                    } else {
                        acc |= v;
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    pass(&pass(mask, true), false)
}

pub fn erode(mask: &[bool], h: usize, w: usize, k: usize) -> Vec<bool> {
    morph(mask, h, w, k, true)
}

pub fn dilate(mask: &[bool], h: usize, w: usize, k: usize) -> Vec<bool> {
    morph(mask, h, w, k, false)
}

/// Trimap with fixed kernels: certain foreground = erode(α == 1, k_erode),
/// certain background = ¬dilate(α > 0, k_dilate), unknown elsewhere.
pub fn trimap_with_kernels<T: Real>(alpha: &Plane<T>, k_erode: usize, k_dilate: usize) -> Plane<T> {
    assert_eq!(alpha.channels(), 1, "alpha must be single-channel");
    let (h, w) = alpha.dims();
    let opaque: Vec<bool> = alpha.data().iter().map(|v| v.f64() >= 1.0).collect();
    let any: Vec<bool> = alpha.data().iter().map(|v| v.f64() > 0.0).collect();
    let fg = erode(&opaque, h, w, k_erode);
    let reach = dilate(&any, h, w, k_dilate);
    let data = fg
        .iter()
        .zip(&reach)
        .map(|(&f, &r)| T::of(if f { 1.0 } else if !r { 0.0 } else { 0.5 }))
        .collect();
    Plane::new(1, h, w, data).expect("trimap levels are finite")
}

/// Draws both kernel sizes uniformly from `[kernel_min, kernel_max]`.
pub fn generate_trimap<T: Real>(alpha: &Plane<T>, kernel_min: usize, kernel_max: usize, rng: &mut SeededRng) -> Plane<T> {
    let (lo, hi) = (kernel_min.max(1), kernel_max.max(kernel_min.max(1)));
    let k_erode = rng.gen_range(lo..=hi);
    let k_dilate = rng.gen_range(lo..=hi);
    trimap_with_kernels(alpha, k_erode, k_dilate)
}
