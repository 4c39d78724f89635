//! Multi-head scaled dot-product attention restricted to token groups.
//!
//! Global attention is a single group; window attention uses one group per
//! window and grid-sampled attention one group per 2x2 parity class.

use std::sync::Arc;

use super::{Graph, Var};
use crate::tensor::{gemm, Real, Tensor};

fn gather<T: Real>(qkv: &[T], width: usize, idx: &[usize], offset: usize, dh: usize, out: &mut [T]) {
    for (r, &t) in idx.iter().enumerate() {
        out[r * dh..(r + 1) * dh].copy_from_slice(&qkv[t * width + offset..t * width + offset + dh]);
    }
}

fn softmax_rows<T: Real>(s: &mut [T], l: usize) {
    for row in s.chunks_mut(l) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

impl<T: Real> Graph<T> {
    /// `qkv: (N, 3C)` packed as `[q | k | v]`; every token index must appear in
    /// exactly one group. Returns the per-head attention output `(N, C)`.
    pub fn grouped_attention(&mut self, qkv: Var, groups: Arc<Vec<Vec<usize>>>, heads: usize) -> Var {
        let [n, c3] = *self.shape(qkv) else { panic!("attention: qkv must be (N, 3C)") };
        assert!(c3 % 3 == 0 && (c3 / 3) % heads == 0, "attention: qkv width");
        debug_assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), n, "attention: groups must cover tokens");
        let c = c3 / 3;
        let dh = c / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let record = self.record;
        let qv = self.value(qkv).data();
        let mut out = vec![T::zero(); n * c];
        let mut probs: Vec<Vec<T>> = Vec::new();
        for idx in groups.iter() {
            let l = idx.len();
            let (mut q, mut k, mut v) = (vec![T::zero(); l * dh], vec![T::zero(); l * dh], vec![T::zero(); l * dh]);
            let mut o = vec![T::zero(); l * dh];
            for h in 0..heads {
                gather(qv, c3, idx, h * dh, dh, &mut q);
                gather(qv, c3, idx, c + h * dh, dh, &mut k);
                gather(qv, c3, idx, 2 * c + h * dh, dh, &mut v);
                let mut s = vec![T::zero(); l * l];
                gemm(l, dh, l, &q, false, &k, true, &mut s, false);
                s.iter_mut().for_each(|x| *x *= scale);
                softmax_rows(&mut s, l);
                gemm(l, l, dh, &s, false, &v, false, &mut o, false);
                for (r, &t) in idx.iter().enumerate() {
                    out[t * c + h * dh..t * c + (h + 1) * dh].copy_from_slice(&o[r * dh..(r + 1) * dh]);
                }
                if record {
                    probs.push(s);
                }
            }
        }
        let out = Tensor::new(vec![n, c], out).unwrap();
        self.push(
            out,
            vec![qkv],
            Box::new(move |g, p, _| {
                let qv = p[0].data();
                let mut dqkv = vec![T::zero(); n * c3];
                let mut pi = 0;
                for idx in groups.iter() {
                    let l = idx.len();
                    let buf = || vec![T::zero(); l * dh];
                    let (mut q, mut k, mut v, mut go) = (buf(), buf(), buf(), buf());
                    let (mut dq, mut dk, mut dv) = (buf(), buf(), buf());
                    let mut dp = vec![T::zero(); l * l];
                    for h in 0..heads {
                        let pm = &probs[pi];
                        pi += 1;
                        gather(qv, c3, idx, h * dh, dh, &mut q);
                        gather(qv, c3, idx, c + h * dh, dh, &mut k);
                        gather(qv, c3, idx, 2 * c + h * dh, dh, &mut v);
                        gather(g, c, idx, h * dh, dh, &mut go);
                        gemm(l, l, dh, pm, true, &go, false, &mut dv, false);
                        gemm(l, dh, l, &go, false, &v, true, &mut dp, false);
                        for (drow, prow) in dp.chunks_mut(l).zip(pm.chunks(l)) {
                            let dot: T = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                            drow.iter_mut().zip(prow).for_each(|(d, p)| *d = *p * (*d - dot) * scale);
                        }
                        gemm(l, l, dh, &dp, false, &k, false, &mut dq, false);
                        gemm(l, l, dh, &dp, true, &q, false, &mut dk, false);
                        for (r, &t) in idx.iter().enumerate() {
                            let row = &mut dqkv[t * c3..(t + 1) * c3];
                            for j in 0..dh {
                                row[h * dh + j] += dq[r * dh + j];
                                row[c + h * dh + j] += dk[r * dh + j];
                                row[2 * c + h * dh + j] += dv[r * dh + j];
                            }
                        }
                    }
                }
                vec![Some(dqkv)]
            }),
        )
    }
}
