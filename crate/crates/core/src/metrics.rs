//! SAD, MSE, Grad and Conn with unknown-region and whole-image modes.
//!
//! Scaling: SAD, Grad and Conn are divided by 1000, MSE is multiplied by
//! 1000. An empty mask yields 0 for every metric.
//!
//! Grad filters both mattes with a first-order Gaussian derivative
//! (σ = 1.4, truncated at `ceil(4σ)` = 6, kernel `gauss(dy)·dgauss(dx)`
//! L2-normalised, replicate border, true convolution) and sums the squared
//! difference of the gradient magnitudes.
//!
//! Conn: for θ in 0.1, 0.2, ..., 1.0 the largest 4-connected component of
//! `pred ≥ θ ∧ gt ≥ θ` is taken as the source (ties go to the component
//! discovered first in column-major order). Each pixel's level `l` is the
//! previous threshold at the first θ where it leaves the source (1 if it
//! never does). With `d = α − l`, `φ = 1 − d·[d ≥ 0.15]`, and the metric is
//! `Σ|φ_pred − φ_gt|`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{MatteError, Result};
use crate::losses::unknown_mask;
use crate::plane::Plane;
use crate::tensor::Real;

pub const GRAD_SIGMA: f64 = 1.4;
pub const CONN_STEP: f64 = 0.1;
pub const CONN_MIN_DISTANCE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    #[default]
    UnknownOnly,
    WholeImage,
}

impl std::str::FromStr for RegionMode {
    type Err = MatteError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unknown_only" | "unknown" => Ok(Self::UnknownOnly),
            "whole_image" | "whole" => Ok(Self::WholeImage),
            other => Err(MatteError::Config(format!("unknown region mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
    pub region_mode: RegionMode,
    /// Pixels inside the evaluation mask.
    pub pixels: usize,
}

fn check<T: Real>(pred: &Plane<T>, gt: &Plane<T>, mask: &[bool]) -> Result<()> {
    if pred.channels() != 1 || gt.channels() != 1 || pred.dims() != gt.dims() || mask.len() != pred.data().len() {
        return Err(MatteError::ShapeMismatch(format!(
            "pred {:?}, gt {:?}, mask of {}",
            pred.dims(),
            gt.dims(),
            mask.len()
        )));
    }
    Ok(())
}

pub fn region_mask<T: Real>(trimap: &Plane<T>, mode: RegionMode) -> Result<Vec<bool>> {
    match mode {
        RegionMode::UnknownOnly => unknown_mask(trimap),
        RegionMode::WholeImage => Ok(vec![true; trimap.data().len()]),
    }
}

pub fn sad<T: Real>(pred: &Plane<T>, gt: &Plane<T>, mask: &[bool]) -> Result<f64> {
    check(pred, gt, mask)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, g), _)| (p.f64() - g.f64()).abs())
        .sum();
    Ok(s / 1000.0)
}

pub fn mse<T: Real>(pred: &Plane<T>, gt: &Plane<T>, mask: &[bool]) -> Result<f64> {
    check(pred, gt, mask)?;
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Ok(0.0);
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, g), _)| (p.f64() - g.f64()).powi(2))
        .sum();
    Ok(1000.0 * s / n as f64)
}

/// 1-D Gaussian and its derivative over `-half..=half`.
pub fn gauss_kernels(sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let half = (4.0 * sigma).ceil() as i64;
    let gauss = |x: f64| (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let g: Vec<f64> = (-half..=half).map(|i| gauss(i as f64)).collect();
    let dg: Vec<f64> = (-half..=half).map(|i| -(i as f64) * gauss(i as f64) / (sigma * sigma)).collect();
    (g, dg)
}

/// Separable convolution (kernel flipped) with replicate border.
fn convolve_separable(x: &[f64], h: usize, w: usize, ky: &[f64], kx: &[f64]) -> Vec<f64> {
    let half_y = (ky.len() / 2) as i64;
    let half_x = (kx.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xo in 0..w {
            let mut s = 0.0;
            for (j, k) in kx.iter().enumerate() {
                let xi = (xo as i64 + half_x - j as i64).clamp(0, w as i64 - 1) as usize;
                s += k * x[y * w + xi];
            }
            tmp[y * w + xo] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for yo in 0..h {
        for xo in 0..w {
            let mut s = 0.0;
            for (i, k) in ky.iter().enumerate() {
                let yi = (yo as i64 + half_y - i as i64).clamp(0, h as i64 - 1) as usize;
                s += k * tmp[yi * w + xo];
            }
            out[yo * w + xo] = s;
        }
    }
    out
}

/// Gaussian-derivative gradient magnitude of a single-channel image.
pub fn gradient_magnitude(x: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let (g, dg) = gauss_kernels(sigma);
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt() * dg.iter().map(|v| v * v).sum::<f64>().sqrt();
    let g: Vec<f64> = g.iter().map(|v| v / norm.sqrt()).collect();
    let dg: Vec<f64> = dg.iter().map(|v| v / norm.sqrt()).collect();
    let gx = convolve_separable(x, h, w, &g, &dg);
    let gy = convolve_separable(x, h, w, &dg, &g);
    gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect()
}

pub fn grad_metric<T: Real>(pred: &Plane<T>, gt: &Plane<T>, mask: &[bool]) -> Result<f64> {
    check(pred, gt, mask)?;
    if !mask.iter().any(|&m| m) {
        return Ok(0.0);
    }
    let (h, w) = pred.dims();
    let to64 = |p: &Plane<T>| p.data().iter().map(|v| v.f64()).collect::<Vec<_>>();
    let a = gradient_magnitude(&to64(pred), h, w, GRAD_SIGMA);
    let b = gradient_magnitude(&to64(gt), h, w, GRAD_SIGMA);
    let s: f64 = a.iter().zip(&b).zip(mask).filter(|(_, &m)| m).map(|((p, g), _)| (p - g).powi(2)).sum();
    Ok(s / 1000.0)
}

/// Largest 4-connected component of `on`; ties go to the component whose
/// first pixel comes earliest in column-major order.
pub fn largest_component(on: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None; // (size, label)
    let mut next = 0;
    let mut queue = VecDeque::new();
    for x in 0..w {
        for y in 0..h {
            let start = y * w + x;
            if !on[start] || label[start] != usize::MAX {
                continue;
            }
            label[start] = next;
            queue.push_back(start);
            let mut size = 0;
            while let Some(i) = queue.pop_front() {
                size += 1;
                let (cy, cx) = (i / w, i % w);
                let mut visit = |j: usize| {
                    if on[j] && label[j] == usize::MAX {
                        label[j] = next;
                        queue.push_back(j);
                    }
                };
                if cy > 0 {
                    visit(i - w);
                }
                if cy + 1 < h {
                    visit(i + w);
                }
                if cx > 0 {
                    visit(i - 1);
                }
                if cx + 1 < w {
                    visit(i + 1);
                }
            }
            if best.is_none_or(|(s, _)| size > s) {
                best = Some((size, next));
            }
            next += 1;
        }
    }
    match best {
        Some((_, l)) => label.iter().map(|&v| v == l).collect(),
        None => vec![false; h * w],
    }
}

fn connectivity_phi(alpha: &[f64], level: &[f64]) -> Vec<f64> {
    alpha
        .iter()
        .zip(level)
        .map(|(a, l)| {
            let d = a - l;
            if d >= CONN_MIN_DISTANCE {
                1.0 - d
            } else {
                1.0
            }
        })
        .collect()
}

pub fn conn_metric<T: Real>(pred: &Plane<T>, gt: &Plane<T>, mask: &[bool]) -> Result<f64> {
    check(pred, gt, mask)?;
    if !mask.iter().any(|&m| m) {
        return Ok(0.0);
    }
    let (h, w) = pred.dims();
    let p: Vec<f64> = pred.data().iter().map(|v| v.f64()).collect();
    let g: Vec<f64> = gt.data().iter().map(|v| v.f64()).collect();
    let steps = (1.0 / CONN_STEP).round() as usize;
    let mut level = vec![f64::NAN; h * w];
    for k in 1..=steps {
        let theta = k as f64 * CONN_STEP;
        let on: Vec<bool> = p.iter().zip(&g).map(|(a, b)| *a >= theta && *b >= theta).collect();
        let omega = largest_component(&on, h, w);
        let prev = (k - 1) as f64 * CONN_STEP;
        for (l, &inside) in level.iter_mut().zip(&omega) {
            if l.is_nan() && !inside {
                *l = prev;
            }
        }
    }
    level.iter_mut().filter(|l| l.is_nan()).for_each(|l| *l = 1.0);
    let a = connectivity_phi(&p, &level);
    let b = connectivity_phi(&g, &level);
    let s: f64 = a.iter().zip(&b).zip(mask).filter(|(_, &m)| m).map(|((x, y), _)| (x - y).abs()).sum();
    Ok(s / 1000.0)
}

pub fn evaluate<T: Real>(pred: &Plane<T>, gt: &Plane<T>, trimap: &Plane<T>, mode: RegionMode) -> Result<MetricsReport> {
    if trimap.dims() != pred.dims() || trimap.channels() != 1 {
        return Err(MatteError::ShapeMismatch(format!("trimap {:?} vs pred {:?}", trimap.dims(), pred.dims())));
    }
    let mask = region_mask(trimap, mode)?;
    Ok(MetricsReport {
        sad: sad(pred, gt, &mask)?,
        mse: mse(pred, gt, &mask)?,
        grad: grad_metric(pred, gt, &mask)?,
        conn: conn_metric(pred, gt, &mask)?,
        region_mode: mode,
        pixels: mask.iter().filter(|&&m| m).count(),
    })
}

/// Mean of each metric over a set of reports.
pub fn aggregate(reports: &[MetricsReport]) -> Option<MetricsReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(MetricsReport {
        sad: mean(|r| r.sad),
        mse: mean(|r| r.mse),
        grad: mean(|r| r.grad),
        conn: mean(|r| r.conn),
        region_mode: first.region_mode,
        pixels: reports.iter().map(|r| r.pixels).sum(),
    })
}
