//! Training-time augmentation: random affine warp of fg/alpha, flip,
//! unknown-biased crop, hue jitter of the foreground and trimap synthesis on
//! the cropped alpha.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::composite::{composite, fit_background};
use super::trimap::trimap_with_kernels;
use super::MattingSample;
use crate::error::Result;
use crate::plane::{MattingInput, Plane, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub shear_deg: f64,
    pub flip_prob: f64,
    pub crop: usize,
    /// Hue shift as a fraction of the full hue circle.
    pub hue: f64,
    pub kernel_min: usize,
    pub kernel_max: usize,
    pub crop_candidates: usize,
    pub min_unknown_fraction: f64,
    /// Take the centred crop instead of sampling candidates.
    pub center_crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            scale_min: 0.8,
            scale_max: 1.25,
            shear_deg: 5.0,
            flip_prob: 0.5,
            crop: 512,
            hue: 0.1,
            kernel_min: 1,
            kernel_max: 30,
            crop_candidates: 10,
            min_unknown_fraction: 0.01,
            center_crop: false,
        }
    }
}

impl AugmentConfig {
    /// No geometric or colour change; centred crop.
    pub fn identity(crop: usize) -> Self {
        Self {
            rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            shear_deg: 0.0,
            flip_prob: 0.0,
            hue: 0.0,
            crop,
            center_crop: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub sample: MattingSample,
    pub image: Plane<f32>,
    pub trimap: Plane<f32>,
}

impl AugmentedSample {
    pub fn input(&self) -> MattingInput<f32> {
        MattingInput::new(self.image.clone(), self.trimap.clone()).expect("augmentation yields valid inputs")
    }
}

fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Inverse 2x2 map for rotation · shear · scale · flip.
fn inverse_affine(angle: f64, shear: f64, scale: f64, flip: bool) -> [[f64; 2]; 2] {
    let (s, c) = angle.sin_cos();
    let rot = [[c, -s], [s, c]];
    let sh = [[1.0, shear.tan()], [0.0, 1.0]];
    let f = if flip { -1.0 } else { 1.0 };
    let sc = [[scale * f, 0.0], [0.0, scale]];
    let mul = |a: [[f64; 2]; 2], b: [[f64; 2]; 2]| {
        [
            [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
            [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
        ]
    };
    let m = mul(mul(rot, sh), sc);
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
}

/// Bilinear warp; `m` maps (x, y) output offsets from the centre to input
/// offsets. Outside samples take `outside` or replicate the border.
fn warp(p: &Plane<f32>, m: [[f64; 2]; 2], outside: Option<f32>) -> Plane<f32> {
    let (h, w) = p.dims();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f32; p.data().len()];
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cx + m[0][0] * dx + m[0][1] * dy;
            let sy = cy + m[1][0] * dx + m[1][1] * dy;
            let beyond = sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5;
            for c in 0..p.channels() {
                out[c * hw + y * w + x] = match (beyond, outside) {
                    (true, Some(v)) => v,
                    _ => sample(p.channel(c), h, w, sy, sx),
                };
            }
        }
    }
    Plane::new(p.channels(), h, w, out).expect("warped values are finite")
}

fn sample(ch: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let sy = sy.clamp(0.0, h as f64 - 1.0);
    let sx = sx.clamp(0.0, w as f64 - 1.0);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let at = |y: usize, x: usize| ch[y * w + x] as f64;
    if fy == 0.0 && fx == 0.0 {
        return ch[y0 * w + x0];
    }
    ((1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))) as f32
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Rotates every pixel's hue by `shift` (fraction of the circle).
pub fn shift_hue(rgb: &Plane<f32>, shift: f64) -> Plane<f32> {
    if shift == 0.0 {
        return rgb.clone();
    }
    let (h, w) = rgb.dims();
    let hw = h * w;
    let d = rgb.data();
    let mut out = vec![0.0f32; 3 * hw];
    for i in 0..hw {
        let (hh, s, v) = rgb_to_hsv(d[i], d[hw + i], d[2 * hw + i]);
        let (r, g, b) = hsv_to_rgb(hh + shift as f32, s, v);
        out[i] = r.clamp(0.0, 1.0);
        out[hw + i] = g.clamp(0.0, 1.0);
        out[2 * hw + i] = b.clamp(0.0, 1.0);
    }
    Plane::new(3, h, w, out).expect("finite")
}

fn pad_to(p: &Plane<f32>, h: usize, w: usize, fill: Option<f32>) -> Plane<f32> {
    let (ph, pw) = p.dims();
    if ph >= h && pw >= w {
        return p.clone();
    }
    let (nh, nw) = (ph.max(h), pw.max(w));
    Plane::from_fn(p.channels(), nh, nw, |c, y, x| match fill {
        Some(v) if y >= ph || x >= pw => v,
        _ => p.get(c, y.min(ph - 1), x.min(pw - 1)),
    })
    .expect("finite")
}

/// One augmented, cropped training sample. The random stream is consumed
/// in a fixed order, so equal seeds give bit-identical outputs.
pub fn augment(sample: &MattingSample, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<AugmentedSample> {
    let angle = uniform(rng, -cfg.rotation_deg, cfg.rotation_deg).to_radians();
    let scale = uniform(rng, cfg.scale_min, cfg.scale_max);
    let shear = uniform(rng, -cfg.shear_deg, cfg.shear_deg).to_radians();
    let flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob.min(1.0));
    let k_erode = rng.gen_range(cfg.kernel_min.max(1)..=cfg.kernel_max.max(cfg.kernel_min.max(1)));
    let k_dilate = rng.gen_range(cfg.kernel_min.max(1)..=cfg.kernel_max.max(cfg.kernel_min.max(1)));

    let m = inverse_affine(angle, shear, scale, flip);
    let fg = warp(&sample.fg, m, None);
    let alpha = warp(&sample.alpha, m, Some(0.0)).map(|v| v.clamp(0.0, 1.0))?;
    let crop = cfg.crop;
    let fg = pad_to(&fg, crop, crop, None);
    let alpha = pad_to(&alpha, crop, crop, Some(0.0));
    let (h, w) = alpha.dims();

    let (y0, x0) = if cfg.center_crop {
        ((h - crop) / 2, (w - crop) / 2)
    } else {
        let full = trimap_with_kernels(&alpha, k_erode, k_dilate);
        let mut chosen = (0, 0);
        for _ in 0..cfg.crop_candidates.max(1) {
            let cand = (rng.gen_range(0..=h - crop), rng.gen_range(0..=w - crop));
            chosen = cand;
            let mut unknown = 0usize;
            for y in cand.0..cand.0 + crop {
                unknown += full.channel(0)[y * w + cand.1..y * w + cand.1 + crop].iter().filter(|&&v| v == 0.5).count();
            }
            if unknown as f64 >= cfg.min_unknown_fraction * (crop * crop) as f64 {
                break;
            }
        }
        chosen
    };
    let hue = uniform(rng, -cfg.hue, cfg.hue);

    let fg = shift_hue(&fg.crop(y0, x0, crop, crop)?, hue);
    let alpha = alpha.crop(y0, x0, crop, crop)?;
    let bg = fit_background(&sample.bg, crop, crop);
    let trimap = trimap_with_kernels(&alpha, k_erode, k_dilate);
    let image = composite(&fg, &bg, &alpha)?;
    Ok(AugmentedSample { sample: MattingSample { fg, bg, alpha }, image, trimap })
}
