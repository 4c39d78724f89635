//! Procedural foregrounds, alphas and backgrounds for tests and desk-scale
//! training.

use std::path::Path;

use rand::Rng;

use super::io::{save_gray_png, save_rgb_png};
use super::MattingSample;
use crate::error::Result;
use crate::plane::{seeded_rng, Plane, SeededRng};

/// Smooth colour field: a linear gradient plus one sinusoidal stripe set.
pub fn synth_texture(h: usize, w: usize, rng: &mut SeededRng) -> Plane<f32> {
    let base: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let tint: [f32; 3] = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let stripe: [f32; 3] = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    let dir = rng.gen_range(0.0..std::f32::consts::TAU);
    let freq = rng.gen_range(0.05..0.6);
    let (gy, gx) = (rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0));
    Plane::from_fn(3, h, w, |c, y, x| {
        let (u, v) = (y as f32 / h.max(1) as f32, x as f32 / w.max(1) as f32);
        let ramp = gy * (u - 0.5) + gx * (v - 0.5);
        let wave = ((x as f32 * dir.cos() + y as f32 * dir.sin()) * freq).sin();
        (base[c] + tint[c] * ramp + stripe[c] * wave).clamp(0.0, 1.0)
    })
    .expect("finite")
}

/// Union of soft ellipses plus a few thin semi-transparent strands.
pub fn synth_alpha(h: usize, w: usize, rng: &mut SeededRng) -> Plane<f32> {
    let blobs = rng.gen_range(1..=3);
    let s = h.min(w) as f32;
    let shapes: Vec<(f32, f32, f32, f32, f32, f32)> = (0..blobs)
        .map(|_| {
            let cy = rng.gen_range(0.3..0.7) * h as f32;
            let cx = rng.gen_range(0.3..0.7) * w as f32;
            let a = rng.gen_range(0.12..0.3) * s;
            let b = rng.gen_range(0.12..0.3) * s;
            let rot = rng.gen_range(0.0..std::f32::consts::PI);
            let soft = rng.gen_range(1.0..4.0);
            (cy, cx, a, b, rot, soft)
        })
        .collect();
    let strands: Vec<(f32, f32, f32, f32)> = (0..rng.gen_range(0..=3))
        .map(|_| {
            (
                rng.gen_range(0.0..h as f32),
                rng.gen_range(0.0..std::f32::consts::PI),
                rng.gen_range(0.3..0.8),
                rng.gen_range(0.5..1.5),
            )
        })
        .collect();
    let (cy0, cx0) = (shapes[0].0, shapes[0].1);
    Plane::from_fn(1, h, w, |_, y, x| {
        let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
        let mut a: f32 = 0.0;
        for &(cy, cx, ra, rb, rot, soft) in &shapes {
            let (s, c) = rot.sin_cos();
            let (dy, dx) = (py - cy, px - cx);
            let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
            let r = ((u / ra).powi(2) + (v / rb).powi(2)).sqrt();
            let dist = (r - 1.0) * ra.min(rb);
            a = a.max((0.5 - dist / soft).clamp(0.0, 1.0));
        }
        // Strands radiate from the first blob's centre.
        for &(_, angle, opacity, width) in &strands {
            let (s, c) = angle.sin_cos();
            let (dy, dx) = (py - cy0, px - cx0);
            let along = c * dx + s * dy;
            let across = (-s * dx + c * dy).abs();
            if along > 0.0 && along < 0.45 * h.max(w) as f32 {
                a = a.max(opacity * (1.0 - across / width).clamp(0.0, 1.0));
            }
        }
        a
    })
    .expect("finite")
}

pub fn synth_sample(h: usize, w: usize, rng: &mut SeededRng) -> MattingSample {
    let alpha = synth_alpha(h, w, rng);
    let fg = synth_texture(h, w, rng);
    let bg = synth_texture(h, w, rng);
    MattingSample { fg, bg, alpha }
}

/// `n` samples drawn from one seeded stream.
pub fn synth_samples(n: usize, h: usize, w: usize, seed: u64) -> Vec<MattingSample> {
    let mut rng = seeded_rng(seed);
    (0..n).map(|_| synth_sample(h, w, &mut rng)).collect()
}

/// Writes `root/{fg,alpha,bg}/*.png` with matching fg/alpha names.
pub fn write_synthetic_dataset(root: &Path, n_fg: usize, n_bg: usize, h: usize, w: usize, seed: u64) -> Result<()> {
    let mut rng = seeded_rng(seed);
    for dir in ["fg", "alpha", "bg"] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    for i in 0..n_fg {
        let alpha = synth_alpha(h, w, &mut rng);
        let fg = synth_texture(h, w, &mut rng);
        save_rgb_png(&root.join("fg").join(format!("fg_{i:04}.png")), &fg)?;
        save_gray_png(&root.join("alpha").join(format!("fg_{i:04}.png")), &alpha)?;
    }
    for j in 0..n_bg {
        let bg = synth_texture(h, w, &mut rng);
        save_rgb_png(&root.join("bg").join(format!("bg_{j:04}.png")), &bg)?;
    }
    Ok(())
}
