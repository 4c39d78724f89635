//! Separable linear resampling: bilinear resize, binomial blur-downsample and
//! same-size 1-D filters. Every map has an exact transpose, which is what the
//! autodiff and the pyramid loss gradients use.

use crate::tensor::Real;

/// Linear map along one axis: `out[o] = sum_t w_t * in[i_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisMap {
    in_len: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisMap {
    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self, o: usize) -> &[(usize, f64)] {
        &self.taps[o]
    }

    pub fn identity(len: usize) -> Self {
        Self { in_len: len, taps: (0..len).map(|i| vec![(i, 1.0)]).collect() }
    }

    /// Bilinear resize with half-pixel centres (`align_corners = false`);
    /// source coordinates below zero clamp to the first sample.
    pub fn bilinear(in_len: usize, out_len: usize) -> Self {
        assert!(in_len > 0 && out_len > 0);
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let w1 = src - i0 as f64;
                if i1 == i0 || w1 == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - w1), (i1, w1)]
                }
            })
            .collect();
        Self { in_len, taps }
    }

    /// Centred correlation with `kernel` (odd length), replicate border.
    pub fn filter(len: usize, kernel: &[f64]) -> Self {
        Self::strided_filter(len, kernel, 1)
    }

    /// 5-tap binomial blur followed by keeping every second sample.
    pub fn blur_down(in_len: usize) -> Self {
        const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        Self::strided_filter(in_len, &BINOMIAL, 2)
    }

    fn strided_filter(in_len: usize, kernel: &[f64], stride: usize) -> Self {
        assert!(kernel.len() % 2 == 1 && in_len > 0);
        let half = (kernel.len() / 2) as isize;
        let out_len = in_len.div_ceil(stride);
        let taps = (0..out_len)
            .map(|o| {
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(kernel.len());
                for (t, &w) in kernel.iter().enumerate() {
                    let i = ((o * stride) as isize + t as isize - half).clamp(0, in_len as isize - 1)
                        as usize;
                    match taps.iter_mut().find(|(j, _)| *j == i) {
                        Some(entry) => entry.1 += w,
                        None => taps.push((i, w)),
                    }
                }
                taps
            })
            .collect();
        Self { in_len, taps }
    }
}

/// Separable 2-D map over channel-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    pub rows: AxisMap,
    pub cols: AxisMap,
}

impl Resampler {
    pub fn new(rows: AxisMap, cols: AxisMap) -> Self {
        Self { rows, cols }
    }

    pub fn bilinear(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        Self::new(AxisMap::bilinear(in_hw.0, out_hw.0), AxisMap::bilinear(in_hw.1, out_hw.1))
    }

    pub fn blur_down(in_hw: (usize, usize)) -> Self {
        Self::new(AxisMap::blur_down(in_hw.0), AxisMap::blur_down(in_hw.1))
    }

    pub fn in_dims(&self) -> (usize, usize) {
        (self.rows.in_len(), self.cols.in_len())
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.rows.out_len(), self.cols.out_len())
    }

    pub fn apply<T: Real>(&self, channels: usize, input: &[T]) -> Vec<T> {
        let (ih, iw) = self.in_dims();
        let (oh, ow) = self.out_dims();
        assert_eq!(input.len(), channels * ih * iw, "resample input size");
        let mut out = vec![T::zero(); channels * oh * ow];
        let mut tmp = vec![T::zero(); ih * ow];
        for c in 0..channels {
            let src = &input[c * ih * iw..(c + 1) * ih * iw];
            for y in 0..ih {
                let row = &src[y * iw..(y + 1) * iw];
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for &(ix, w) in self.cols.taps(ox) {
                        acc += row[ix] * T::of(w);
                    }
                    tmp[y * ow + ox] = acc;
                }
            }
            let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
            for oy in 0..oh {
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for &(iy, w) in self.rows.taps(oy) {
                    let w = T::of(w);
                    for (d, &s) in drow.iter_mut().zip(&tmp[iy * ow..(iy + 1) * ow]) {
                        *d += s * w;
                    }
                }
            }
        }
        out
    }

    /// Applies the transpose of [`Resampler::apply`] (maps output-space
    /// gradients back to input space).
    pub fn apply_transpose<T: Real>(&self, channels: usize, grad: &[T]) -> Vec<T> {
        let (ih, iw) = self.in_dims();
        let (oh, ow) = self.out_dims();
        assert_eq!(grad.len(), channels * oh * ow, "resample grad size");
        let mut out = vec![T::zero(); channels * ih * iw];
        let mut tmp = vec![T::zero(); ih * ow];
        for c in 0..channels {
            tmp.iter_mut().for_each(|v| *v = T::zero());
            let g = &grad[c * oh * ow..(c + 1) * oh * ow];
            for oy in 0..oh {
                let grow = &g[oy * ow..(oy + 1) * ow];
                for &(iy, w) in self.rows.taps(oy) {
                    let w = T::of(w);
                    for (t, &s) in tmp[iy * ow..(iy + 1) * ow].iter_mut().zip(grow) {
                        *t += s * w;
                    }
                }
            }
            let dst = &mut out[c * ih * iw..(c + 1) * ih * iw];
            for y in 0..ih {
                for ox in 0..ow {
                    let v = tmp[y * ow + ox];
                    for &(ix, w) in self.cols.taps(ox) {
                        dst[y * iw + ix] += v * T::of(w);
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bilinear_of_constant_is_constant() {
        let r = Resampler::bilinear((4, 5), (8, 10));
        let out = r.apply(2, &vec![0.75f64; 2 * 20]);
        assert!(out.iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn bilinear_2x_matches_half_pixel_convention() {
        // 1-D [0, 1] upsampled to 4 samples: sources -0.25,0.25,0.75,1.25.
        let m = AxisMap::bilinear(2, 4);
        let r = Resampler::new(AxisMap::identity(1), m);
        let out = r.apply(1, &[0.0f64, 1.0]);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn blur_down_halves_with_ceiling() {
        assert_eq!(AxisMap::blur_down(7).out_len(), 4);
        let r = Resampler::blur_down((6, 6));
        let out = r.apply(1, &vec![2.0f64; 36]);
        assert!(out.iter().all(|&v| (v - 2.0).abs() < 1e-14));
    }

    proptest! {
        #[test]
        fn transpose_is_adjoint(
            ih in 1usize..7, iw in 1usize..7, oh in 1usize..9, ow in 1usize..9,
            seed in 0u64..1000,
        ) {
            // <A x, y> == <x, A^T y>
            let r = Resampler::bilinear((ih, iw), (oh, ow));
            let x: Vec<f64> = (0..ih * iw).map(|i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect();
            let y: Vec<f64> = (0..oh * ow).map(|i| ((i as u64 * 7 + seed) % 13) as f64 - 6.0).collect();
            let ax = r.apply(1, &x);
            let aty = r.apply_transpose(1, &y);
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
