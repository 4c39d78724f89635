//! Training objective: separate L1 over known/unknown regions, Laplacian
//! pyramid loss and a forward-difference gradient penalty.
//!
//! Every `*_grad` function returns the loss value together with its
//! (sub)gradient with respect to `pred`; `sign(0)` is taken as 0.

use serde::{Deserialize, Serialize};

use crate::error::{MatteError, Result};
use crate::plane::{Plane, TRIMAP_EXACT_TOL};
use crate::resample::Resampler;
use crate::tensor::Real;

pub const LAPLACIAN_LEVELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub separate_l1: f64,
    pub laplacian: f64,
    pub gradient_penalty: f64,
    pub total: f64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_pair<T: Real>(pred: &Plane<T>, gt: &Plane<T>) -> Result<()> {
    if pred.channels() != 1 || gt.channels() != 1 || pred.dims() != gt.dims() {
        return Err(MatteError::ShapeMismatch(format!(
            "pred {}x{}x{} vs gt {}x{}x{}",
            pred.channels(),
            pred.height(),
            pred.width(),
            gt.channels(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// `true` for unknown pixels; errors on values outside {0, 0.5, 1}.
pub(crate) fn unknown_mask<T: Real>(trimap: &Plane<T>) -> Result<Vec<bool>> {
    trimap
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let v = v.f64();
            if (v - 0.5).abs() <= TRIMAP_EXACT_TOL {
                Ok(true)
            } else if v.abs() <= TRIMAP_EXACT_TOL || (v - 1.0).abs() <= TRIMAP_EXACT_TOL {
                Ok(false)
            } else {
                Err(MatteError::InvalidTrimapValue { value: v, index: i })
            }
        })
        .collect()
}

pub fn separate_l1_grad<T: Real>(pred: &Plane<T>, gt: &Plane<T>, trimap: &Plane<T>) -> Result<(f64, Vec<T>)> {
    check_pair(pred, gt)?;
    if trimap.channels() != 1 || trimap.dims() != pred.dims() {
        return Err(MatteError::ShapeMismatch("trimap dims differ from pred".into()));
    }
    let unknown = unknown_mask(trimap)?;
    let nu = unknown.iter().filter(|&&u| u).count();
    let nk = unknown.len() - nu;
    let (mut su, mut sk) = (0.0, 0.0);
    let mut grad = vec![T::zero(); unknown.len()];
    for (i, (p, g)) in pred.data().iter().zip(gt.data()).enumerate() {
        let d = p.f64() - g.f64();
        let n = if unknown[i] { nu } else { nk };
        if unknown[i] {
            su += d.abs();
        } else {
            sk += d.abs();
        }
        grad[i] = T::of(sign(d) / n as f64);
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok((mean(su, nu) + mean(sk, nk), grad))
}

pub fn separate_l1<T: Real>(pred: &Plane<T>, gt: &Plane<T>, trimap: &Plane<T>) -> Result<f64> {
    separate_l1_grad(pred, gt, trimap).map(|r| r.0)
}

/// Linear pyramid operator for one input size.
struct Pyramid {
    dims: Vec<(usize, usize)>,
    down: Vec<Resampler>,
    up: Vec<Resampler>,
}

impl Pyramid {
    fn new(h: usize, w: usize, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(MatteError::TooSmall("pyramid needs at least one level".into()));
        }
        let need = 1usize << (levels - 1);
        if h < need || w < need {
            return Err(MatteError::TooSmall(format!("{h}x{w} is too small for a {levels}-level pyramid (min {need})")));
        }
        let mut dims = vec![(h, w)];
        let (mut down, mut up) = (Vec::new(), Vec::new());
        for _ in 1..levels {
            let cur = *dims.last().unwrap();
            let d = Resampler::blur_down(cur);
            let next = d.out_dims();
            up.push(Resampler::bilinear(next, cur));
            down.push(d);
            dims.push(next);
        }
        Ok(Self { dims, down, up })
    }

    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let levels = self.dims.len();
        let mut gauss = vec![x.to_vec()];
        for d in &self.down {
            let next = d.apply(1, gauss.last().unwrap());
            gauss.push(next);
        }
        let mut out = Vec::with_capacity(levels);
        for i in 0..levels - 1 {
            let up = self.up[i].apply(1, &gauss[i + 1]);
            out.push(gauss[i].iter().zip(&up).map(|(a, b)| a - b).collect());
        }
        out.push(gauss.pop().unwrap());
        out
    }

    /// Adjoint of [`Pyramid::forward`].
    fn backward(&self, grads: &[Vec<f64>]) -> Vec<f64> {
        let levels = self.dims.len();
        let mut dg: Vec<Vec<f64>> = grads.to_vec();
        for i in 0..levels - 1 {
            let t = self.up[i].apply_transpose(1, &grads[i]);
            dg[i + 1].iter_mut().zip(&t).for_each(|(a, b)| *a -= b);
        }
        for i in (1..levels).rev() {
            let t = self.down[i - 1].apply_transpose(1, &dg[i]);
            dg[i - 1].iter_mut().zip(&t).for_each(|(a, b)| *a += b);
        }
        dg.swap_remove(0)
    }
}

/// Band-pass levels (finest first) followed by the coarsest Gaussian level.
/// Requires both dims ≥ `2^(levels-1)`.
pub fn laplacian_pyramid<T: Real>(x: &Plane<T>, levels: usize) -> Result<Vec<Plane<T>>> {
    if x.channels() != 1 {
        return Err(MatteError::ShapeMismatch("pyramid input must have one channel".into()));
    }
    let pyr = Pyramid::new(x.height(), x.width(), levels)?;
    let data: Vec<f64> = x.data().iter().map(|v| v.f64()).collect();
    pyr.forward(&data)
        .into_iter()
        .zip(&pyr.dims)
        .map(|(l, &(h, w))| Plane::new(1, h, w, l.into_iter().map(T::of).collect()))
        .collect()
}

/// Inverse of [`laplacian_pyramid`] by iterated upsample-and-add.
pub fn reconstruct_pyramid<T: Real>(levels: &[Plane<T>]) -> Result<Plane<T>> {
    let mut cur = levels.last().ok_or_else(|| MatteError::TooSmall("empty pyramid".into()))?.clone();
    for band in levels.iter().rev().skip(1) {
        let up = Resampler::bilinear(cur.dims(), band.dims()).apply(1, cur.data());
        cur = Plane::new(1, band.height(), band.width(), band.data().iter().zip(&up).map(|(a, b)| *a + *b).collect())?;
    }
    Ok(cur)
}

/// `Σ_s 2^(s-1) · mean|Lap_s(pred) - Lap_s(gt)|` over five levels.
pub fn laplacian_loss_grad<T: Real>(pred: &Plane<T>, gt: &Plane<T>) -> Result<(f64, Vec<T>)> {
    check_pair(pred, gt)?;
    let pyr = Pyramid::new(pred.height(), pred.width(), LAPLACIAN_LEVELS)?;
    let diff: Vec<f64> = pred.data().iter().zip(gt.data()).map(|(p, g)| p.f64() - g.f64()).collect();
    let bands = pyr.forward(&diff);
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(bands.len());
    for (s, band) in bands.iter().enumerate() {
        let w = (1u64 << s) as f64 / band.len() as f64;
        loss += w * band.iter().map(|v| v.abs()).sum::<f64>();
        grads.push(band.iter().map(|&v| w * sign(v)).collect());
    }
    Ok((loss, pyr.backward(&grads).into_iter().map(T::of).collect()))
}

pub fn laplacian_loss<T: Real>(pred: &Plane<T>, gt: &Plane<T>) -> Result<f64> {
    laplacian_loss_grad(pred, gt).map(|r| r.0)
}

/// `mean(|∂x pred − ∂x gt| + |∂y pred − ∂y gt|)`, forward differences with
/// a replicated last row/column (so the boundary difference is zero).
pub fn gradient_penalty_grad<T: Real>(pred: &Plane<T>, gt: &Plane<T>) -> Result<(f64, Vec<T>)> {
    check_pair(pred, gt)?;
    let (h, w) = pred.dims();
    let e: Vec<f64> = pred.data().iter().zip(gt.data()).map(|(p, g)| p.f64() - g.f64()).collect();
    let n = (h * w) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let d = e[i + 1] - e[i];
                loss += d.abs();
                grad[i + 1] += sign(d) / n;
                grad[i] -= sign(d) / n;
            }
            if y + 1 < h {
                let d = e[i + w] - e[i];
                loss += d.abs();
                grad[i + w] += sign(d) / n;
                grad[i] -= sign(d) / n;
            }
        }
    }
    Ok((loss / n, grad.into_iter().map(T::of).collect()))
}

pub fn gradient_penalty_loss<T: Real>(pred: &Plane<T>, gt: &Plane<T>) -> Result<f64> {
    gradient_penalty_grad(pred, gt).map(|r| r.0)
}

/// Unweighted sum of the three terms and its gradient w.r.t. `pred`.
pub fn total_loss_grad<T: Real>(pred: &Plane<T>, gt: &Plane<T>, trimap: &Plane<T>) -> Result<(LossBreakdown, Vec<T>)> {
    let (l1, g1) = separate_l1_grad(pred, gt, trimap)?;
    let (lap, g2) = laplacian_loss_grad(pred, gt)?;
    let (gp, g3) = gradient_penalty_grad(pred, gt)?;
    let grad = g1.iter().zip(&g2).zip(&g3).map(|((a, b), c)| *a + *b + *c).collect();
    Ok((LossBreakdown { separate_l1: l1, laplacian: lap, gradient_penalty: gp, total: l1 + lap + gp }, grad))
}

pub fn total_loss<T: Real>(pred: &Plane<T>, gt: &Plane<T>, trimap: &Plane<T>) -> Result<LossBreakdown> {
    total_loss_grad(pred, gt, trimap).map(|r| r.0)
}
