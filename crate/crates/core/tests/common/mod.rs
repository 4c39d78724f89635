//! Brute-force reference implementations shared by the integration tests and
//! the acceptance suite. Written directly from the metric definitions, without
//! reusing library code paths.

#![allow(dead_code)]

use plainmatte::plane::Plane;
use rand::Rng;

pub fn to_vec(p: &Plane<f64>) -> Vec<f64> {
    p.data().to_vec()
}

pub fn sad(pred: &[f64], gt: &[f64], mask: &[bool]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        if mask[i] {
            s += (pred[i] - gt[i]).abs();
        }
    }
    s / 1000.0
}

pub fn mse(pred: &[f64], gt: &[f64], mask: &[bool]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..pred.len() {
        if mask[i] {
            s += (pred[i] - gt[i]) * (pred[i] - gt[i]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        1000.0 * s / n as f64
    }
}

/// Full 2-D Gaussian-derivative kernels (x and y), L2-normalised.
fn derivative_kernels(sigma: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, i64) {
    let half = (4.0 * sigma).ceil() as i64;
    let size = (2 * half + 1) as usize;
    let g = |v: f64| (-v * v / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let dg = |v: f64| -v * g(v) / (sigma * sigma);
    let mut kx = vec![vec![0.0; size]; size];
    for (i, row) in kx.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = g(i as f64 - half as f64) * dg(j as f64 - half as f64);
        }
    }
    let norm: f64 = kx.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    kx.iter_mut().flatten().for_each(|v| *v /= norm);
    let ky: Vec<Vec<f64>> = (0..size).map(|i| (0..size).map(|j| kx[j][i]).collect()).collect();
    (kx, ky, half)
}

fn convolve2d(x: &[f64], h: usize, w: usize, k: &[Vec<f64>], half: i64) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        for xx in 0..w as i64 {
            let mut s = 0.0;
            for (i, row) in k.iter().enumerate() {
                for (j, kv) in row.iter().enumerate() {
                    let sy = (y + half - i as i64).clamp(0, h as i64 - 1);
                    let sx = (xx + half - j as i64).clamp(0, w as i64 - 1);
                    s += kv * x[(sy * w as i64 + sx) as usize];
                }
            }
            out[(y * w as i64 + xx) as usize] = s;
        }
    }
    out
}

pub fn grad(pred: &[f64], gt: &[f64], mask: &[bool], h: usize, w: usize) -> f64 {
    if !mask.iter().any(|&m| m) {
        return 0.0;
    }
    let (kx, ky, half) = derivative_kernels(1.4);
    let mag = |x: &[f64]| {
        let gx = convolve2d(x, h, w, &kx, half);
        let gy = convolve2d(x, h, w, &ky, half);
        gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect::<Vec<_>>()
    };
    let (a, b) = (mag(pred), mag(gt));
    (0..h * w).filter(|&i| mask[i]).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>() / 1000.0
}

/// Largest 4-connected component by repeated min-label relaxation; labels
/// are column-major indices, so ties go to the smallest column-major start.
pub fn largest_component(on: &[bool], h: usize, w: usize) -> Vec<bool> {
    let cm = |i: usize| (i % w) * h + i / w;
    let mut label: Vec<usize> = (0..h * w).map(|i| if on[i] { cm(i) } else { usize::MAX }).collect();
    loop {
        let mut changed = false;
        for i in 0..h * w {
            if !on[i] {
                continue;
            }
            let (y, x) = (i / w, i % w);
            let mut best = label[i];
            if y > 0 && on[i - w] {
                best = best.min(label[i - w]);
            }
            if y + 1 < h && on[i + w] {
                best = best.min(label[i + w]);
            }
            if x > 0 && on[i - 1] {
                best = best.min(label[i - 1]);
            }
            if x + 1 < w && on[i + 1] {
                best = best.min(label[i + 1]);
            }
            if best < label[i] {
                label[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut sizes = std::collections::BTreeMap::new();
    for &l in label.iter().filter(|&&l| l != usize::MAX) {
        *sizes.entry(l).or_insert(0usize) += 1;
    }
    let mut pick: Option<(usize, usize)> = None;
    for (&l, &s) in &sizes {
        if pick.is_none_or(|(_, ps)| s > ps) {
            pick = Some((l, s));
        }
    }
    match pick {
        Some((l, _)) => label.iter().map(|&v| v == l).collect(),
        None => vec![false; h * w],
    }
}

pub fn conn(pred: &[f64], gt: &[f64], mask: &[bool], h: usize, w: usize) -> f64 {
    if !mask.iter().any(|&m| m) {
        return 0.0;
    }
    let mut level = vec![1.0; h * w];
    let mut set = vec![false; h * w];
    for k in 1..=10 {
        let theta = k as f64 * 0.1;
        let on: Vec<bool> = (0..h * w).map(|i| pred[i] >= theta && gt[i] >= theta).collect();
        let omega = largest_component(&on, h, w);
        for i in 0..h * w {
            if !set[i] && !omega[i] {
                level[i] = (k - 1) as f64 * 0.1;
                set[i] = true;
            }
        }
    }
    let phi = |a: f64, l: f64| if a - l >= 0.15 { 1.0 - (a - l) } else { 1.0 };
    (0..h * w).filter(|&i| mask[i]).map(|i| (phi(pred[i], level[i]) - phi(gt[i], level[i])).abs()).sum::<f64>() / 1000.0
}

/// Square `k x k` erosion (`all`) or dilation (`any`) with replicate border.
pub fn morph(mask: &[bool], h: usize, w: usize, k: usize, all: bool) -> Vec<bool> {
    let k = if k % 2 == 0 { k + 1 } else { k };
    let r = (k / 2) as i64;
    let mut out = vec![false; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut hits = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sy = (y + dy).clamp(0, h as i64 - 1) as usize;
                    let sx = (x + dx).clamp(0, w as i64 - 1) as usize;
                    hits += mask[sy * w + sx] as usize;
                }
            }
            out[(y * w as i64 + x) as usize] = if all { hits == k * k } else { hits > 0 };
        }
    }
    out
}

pub fn trimap(alpha: &[f64], h: usize, w: usize, k_erode: usize, k_dilate: usize) -> Vec<f64> {
    let fg = morph(&alpha.iter().map(|&a| a >= 1.0).collect::<Vec<_>>(), h, w, k_erode, true);
    let any = morph(&alpha.iter().map(|&a| a > 0.0).collect::<Vec<_>>(), h, w, k_dilate, false);
    (0..h * w).map(|i| if fg[i] { 1.0 } else if !any[i] { 0.0 } else { 0.5 }).collect()
}

/// Random alpha with flat regions (exact 0 and 1), ramps and noise.
pub fn random_alpha(rng: &mut impl Rng, h: usize, w: usize) -> Vec<f64> {
    let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
    let r = rng.gen_range(1.0..(h.max(w) as f64));
    let soft = rng.gen_range(0.5..4.0);
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            let base = ((r - d) / soft).clamp(-0.5, 1.5);
            let noise = if rng.gen_bool(0.2) { rng.gen_range(-0.3..0.3) } else { 0.0 };
            (base + noise).clamp(0.0, 1.0)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
