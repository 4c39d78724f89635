//! 2-D convolution via im2col + GEMM.

use super::{Graph, Var};
use crate::tensor::{gemm, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub const fn same(kernel: usize) -> Self {
        Self { stride: 1, padding: kernel / 2, groups: 1 }
    }

    pub const fn strided(kernel: usize, stride: usize) -> Self {
        Self { stride, padding: kernel / 2, groups: 1 }
    }

    pub const fn patchify(patch: usize) -> Self {
        Self { stride: patch, padding: 0, groups: 1 }
    }

    pub const fn depthwise(kernel: usize, channels: usize) -> Self {
        Self { stride: 1, padding: kernel / 2, groups: channels }
    }

    pub fn output_dims(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        ((h + 2 * self.padding - kh) / self.stride + 1, (w + 2 * self.padding - kw) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin_g: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let cols = self.cols();
        for ci in 0..self.cin_g {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let srow = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { T::zero() } else { srow[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let cols = self.cols();
        for ci in 0..self.cin_g {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// Zero-padded convolution of `x: (Cin, H, W)` with `w: (Cout, Cin/groups, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Var {
        let [cin, h, wd] = *self.shape(x) else { panic!("conv2d: x must be (C, H, W)") };
        let [cout, cin_g, kh, kw] = *self.shape(w) else { panic!("conv2d: weight must be 4-D") };
        let groups = spec.groups;
        assert!(groups >= 1 && cin % groups == 0 && cout % groups == 0, "conv2d: groups");
        assert_eq!(cin / groups, cin_g, "conv2d: weight input channels");
        assert!(h + 2 * spec.padding >= kh && wd + 2 * spec.padding >= kw, "conv2d: kernel larger than input");
        let (oh, ow) = spec.output_dims(h, wd, kh, kw);
        let geo = Geometry { cin_g, h, w: wd, kh, kw, oh, ow, stride: spec.stride, pad: spec.padding };
        let cout_g = cout / groups;
        let (rows, cols) = (geo.rows(), geo.cols());

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); cout * cols];
        let keep_cols = self.record && !geo.is_pointwise();
        let mut saved_cols: Vec<Vec<T>> = Vec::new();
        let mut col = vec![T::zero(); if geo.is_pointwise() { 0 } else { rows * cols }];
        for g in 0..groups {
            let xg = &xv[g * cin_g * h * wd..(g + 1) * cin_g * h * wd];
            let wg = &wv[g * cout_g * rows..(g + 1) * cout_g * rows];
            let og = &mut out[g * cout_g * cols..(g + 1) * cout_g * cols];
            if geo.is_pointwise() {
                gemm(cout_g, rows, cols, wg, false, xg, false, og, false);
            } else {
                geo.im2col(xg, &mut col);
                gemm(cout_g, rows, cols, wg, false, &col, false, og, false);
                if keep_cols {
                    saved_cols.push(col.clone());
                }
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), cout, "conv2d: bias length");
            out.chunks_mut(cols).zip(bv).for_each(|(ch, &b)| ch.iter_mut().for_each(|v| *v += b));
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        let out = Tensor::new(vec![cout, oh, ow], out).unwrap();
        self.push(
            out,
            parents,
            Box::new(move |gout, p, _| {
                let xv = p[0].data();
                let wv = p[1].data();
                let mut dx = vec![T::zero(); cin * h * wd];
                let mut dw = vec![T::zero(); cout * rows];
                let mut dcol = vec![T::zero(); if geo.is_pointwise() { 0 } else { rows * cols }];
                for g in 0..groups {
                    let gg = &gout[g * cout_g * cols..(g + 1) * cout_g * cols];
                    let wg = &wv[g * cout_g * rows..(g + 1) * cout_g * rows];
                    let dwg = &mut dw[g * cout_g * rows..(g + 1) * cout_g * rows];
                    let dxg = &mut dx[g * cin_g * h * wd..(g + 1) * cin_g * h * wd];
                    if geo.is_pointwise() {
                        let xg = &xv[g * cin_g * h * wd..(g + 1) * cin_g * h * wd];
                        gemm(cout_g, cols, rows, gg, false, xg, true, dwg, false);
                        gemm(rows, cout_g, cols, wg, true, gg, false, dxg, false);
                    } else {
                        let col = &saved_cols[g];
                        gemm(cout_g, cols, rows, gg, false, col, true, dwg, false);
                        gemm(rows, cout_g, cols, wg, true, gg, false, &mut dcol, false);
                        geo.col2im(&dcol, dxg);
                    }
                }
                let mut grads = vec![Some(dx), Some(dw)];
                if has_bias {
                    grads.push(Some(gout.chunks(cols).map(|ch| ch.iter().copied().sum()).collect()));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::check::{op_grad_error, random};
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: Conv2dSpec) -> Vec<f64> {
        let [cin, h, wd] = *x.shape() else { unreachable!() };
        let [cout, cin_g, kh, kw] = *w.shape() else { unreachable!() };
        let (oh, ow) = spec.output_dims(h, wd, kh, kw);
        let cout_g = cout / spec.groups;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((g * cin_g + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin_g + ci) * kh + ky) * kw + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let _ = cin;
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let cases = [
            (random(&[3, 7, 6], 1), random(&[4, 3, 3, 3], 2), Conv2dSpec::same(3)),
            (random(&[3, 7, 6], 3), random(&[5, 3, 3, 3], 4), Conv2dSpec::strided(3, 2)),
            (random(&[4, 8, 8], 5), random(&[6, 4, 4, 4], 6), Conv2dSpec::patchify(4)),
            (random(&[4, 5, 5], 7), random(&[4, 1, 3, 3], 8), Conv2dSpec::depthwise(3, 4)),
            (random(&[3, 4, 4], 9), random(&[2, 3, 1, 1], 10), Conv2dSpec { stride: 1, padding: 0, groups: 1 }),
        ];
        for (x, w, spec) in cases {
            let mut g = Graph::inference();
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv2d(xv, wv, None, spec);
            let want = naive_conv(&x, &w, spec);
            for (a, b) in g.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for (spec, wshape) in [
            (Conv2dSpec::same(3), [3, 2, 3, 3]),
            (Conv2dSpec::strided(3, 2), [3, 2, 3, 3]),
            (Conv2dSpec::depthwise(3, 2), [2, 1, 3, 3]),
            (Conv2dSpec { stride: 1, padding: 0, groups: 1 }, [3, 2, 1, 1]),
        ] {
            let err = op_grad_error(
                &[random(&[2, 5, 4], 11), random(&wshape, 12), random(&[wshape[0]], 13)],
                |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec),
            );
            assert!(err < 1e-6, "{spec:?}: {err}");
        }
    }
}
