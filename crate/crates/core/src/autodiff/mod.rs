//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter as
//! named leaves; [`Graph::backward`] walks the tape in reverse and returns the
//! gradients of those leaves. Inference graphs skip recording entirely.

mod attention;
mod conv;

use std::collections::HashMap;
use std::sync::Arc;

use crate::resample::Resampler;
use crate::tensor::{gemm, Real, Tensor};

pub use conv::Conv2dSpec;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn<T> = Box<dyn Fn(&[T], &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    record: bool,
}

impl<T: Real> Graph<T> {
    /// Graph that records operations for a later backward pass.
    pub fn training() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), record: true }
    }

    /// Graph that only evaluates.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// Constant input (never receives a gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf whose gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: value.clone(),
            parents: Vec::new(),
            backward: None,
            needs_grad: self.record,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        v
    }

    /// Leaf that receives a gradient but is not a named parameter (used to
    /// differentiate with respect to inputs).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, needs_grad: self.record });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<Var>, backward: BackwardFn<T>) -> Var {
        let needs_grad = self.record && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: needs_grad.then_some(backward),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Back-propagates `seed` (the gradient of a scalar objective with respect
    /// to `root`'s value) through the tape.
    pub fn backward(&self, root: Var, seed: Vec<T>) -> Gradients<T> {
        assert_eq!(seed.len(), self.nodes[root.0].value.len(), "seed must match root size");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parents: Vec<&Tensor<T>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = backward(&g, &parents, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let mut named = HashMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            named.insert(name.clone(), g);
        }
        Gradients { leaves: grads, named }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shapes differ");
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(self.value(b).data()).for_each(|(x, y)| *x += *y);
        self.push(out, vec![a, b], Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.to_vec())]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= s);
        self.push(out, vec![a], Box::new(move |g, _, _| vec![Some(g.iter().map(|&v| v * s).collect())]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape).expect("reshape size");
        self.push(out, vec![a], Box::new(|g, _, _| vec![Some(g.to_vec())]))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, a: Var) -> Var {
        let [r, c] = *self.shape(a) else { panic!("transpose needs a matrix") };
        let out = Tensor::new(vec![c, r], transpose(r, c, self.value(a).data())).unwrap();
        self.push(out, vec![a], Box::new(move |g, _, _| vec![Some(transpose(c, r, g))]))
    }

    /// `x W^T + b` for `x: (N, in)`, `W: (out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let [n, i] = *self.shape(x) else { panic!("linear: x must be a matrix") };
        let [o, wi] = *self.shape(w) else { panic!("linear: weight must be a matrix") };
        assert_eq!(i, wi, "linear: inner dims");
        let mut out = vec![T::zero(); n * o];
        gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), o);
            out.chunks_mut(o).for_each(|row| row.iter_mut().zip(bias).for_each(|(v, b)| *v += *b));
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        let out = Tensor::new(vec![n, o], out).unwrap();
        self.push(
            out,
            parents,
            Box::new(move |g, p, _| {
                let mut dx = vec![T::zero(); n * i];
                gemm(n, o, i, g, false, p[1].data(), false, &mut dx, false);
                let mut dw = vec![T::zero(); o * i];
                gemm(o, n, i, g, true, p[0].data(), false, &mut dw, false);
                let mut grads = vec![Some(dx), Some(dw)];
                if has_bias {
                    let mut db = vec![T::zero(); o];
                    g.chunks(o).for_each(|row| db.iter_mut().zip(row).for_each(|(d, v)| *d += *v));
                    grads.push(Some(db));
                }
                grads
            }),
        )
    }

    /// LayerNorm over the last axis of `(N, C)`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let [n, c] = *self.shape(x) else { panic!("layer_norm: x must be (N, C)") };
        self.norm_impl(x, gamma, beta, eps, NormLayout { groups: n, width: c, group_stride: c, elem_stride: 1 })
    }

    /// LayerNorm across channels at every pixel of a `(C, H, W)` map.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let [c, h, w] = *self.shape(x) else { panic!("channel_norm: x must be (C, H, W)") };
        self.norm_impl(x, gamma, beta, eps, NormLayout { groups: h * w, width: c, group_stride: 1, elem_stride: h * w })
    }

    fn norm_impl(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, l: NormLayout) -> Var {
        assert_eq!(self.value(gamma).len(), l.width, "norm: gamma width");
        assert_eq!(self.value(beta).len(), l.width, "norm: beta width");
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let eps = T::of(eps);
        let inv_c = T::one() / T::of(l.width as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); l.groups];
        let mut out = vec![T::zero(); xv.len()];
        for gi in 0..l.groups {
            let base = gi * l.group_stride;
            let idx = |j: usize| base + j * l.elem_stride;
            let mean = (0..l.width).map(|j| xv[idx(j)]).sum::<T>() * inv_c;
            let var = (0..l.width).map(|j| (xv[idx(j)] - mean).powi(2)).sum::<T>() * inv_c;
            let is = T::one() / (var + eps).sqrt();
            inv_std[gi] = is;
            for j in 0..l.width {
                let xh = (xv[idx(j)] - mean) * is;
                xhat[idx(j)] = xh;
                out[idx(j)] = xh * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let out = Tensor::new(shape, out).unwrap();
        let record = self.record;
        let (xhat, inv_std) = if record { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        self.push(
            out,
            vec![x, gamma, beta],
            Box::new(move |g, p, _| {
                let gv = p[1].data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); l.width];
                let mut dbeta = vec![T::zero(); l.width];
                for gi in 0..l.groups {
                    let base = gi * l.group_stride;
                    let idx = |j: usize| base + j * l.elem_stride;
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..l.width {
                        let k = idx(j);
                        let d = g[k] * gv[j];
                        mean_d += d;
                        mean_dx += d * xhat[k];
                        dgamma[j] += g[k] * xhat[k];
                        dbeta[j] += g[k];
                    }
                    mean_d *= inv_c;
                    mean_dx *= inv_c;
                    for j in 0..l.width {
                        let k = idx(j);
                        dx[k] = (g[k] * gv[j] - mean_d - xhat[k] * mean_dx) * inv_std[gi];
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        )
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let out = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().map(|&v| f(v)).collect(),
        )
        .unwrap();
        self.push(
            out,
            vec![x],
            Box::new(move |g, p, y| {
                vec![Some(
                    g.iter()
                        .zip(p[0].data())
                        .zip(y.data())
                        .map(|((&g, &x), &y)| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), |_, y| y * (T::one() - y))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                let v = v.f64();
                T::of(0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
            },
            |x, _| {
                let x = x.f64();
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                T::of(cdf + x * pdf)
            },
        )
    }

    /// Picks rows of an `(N, C)` matrix; `None` entries produce zero rows.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<Option<usize>>>) -> Var {
        let [n, c] = *self.shape(x) else { panic!("gather_rows: x must be a matrix") };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); index.len() * c];
        for (r, i) in index.iter().enumerate() {
            if let Some(i) = *i {
                out[r * c..(r + 1) * c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::new(vec![index.len(), c], out).unwrap();
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, _| {
                let mut dx = vec![T::zero(); n * c];
                for (r, i) in index.iter().enumerate() {
                    if let Some(i) = *i {
                        dx[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(d, v)| *d += *v);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Concatenates `(C1, H, W)` and `(C2, H, W)` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[1..] == sb[1..], "concat: {sa:?} vs {sb:?}");
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let split = self.value(a).len();
        let out = Tensor::new(vec![sa[0] + sb[0], sa[1], sa[2]], data).unwrap();
        self.push(
            out,
            vec![a, b],
            Box::new(move |g, _, _| vec![Some(g[..split].to_vec()), Some(g[split..].to_vec())]),
        )
    }

    /// Separable resampling of a `(C, H, W)` map.
    pub fn resample(&mut self, x: Var, map: Arc<Resampler>) -> Var {
        let [c, h, w] = *self.shape(x) else { panic!("resample: x must be (C, H, W)") };
        assert_eq!((h, w), map.in_dims(), "resample: input dims");
        let (oh, ow) = map.out_dims();
        let out = Tensor::new(vec![c, oh, ow], map.apply(c, self.value(x).data())).unwrap();
        self.push(out, vec![x], Box::new(move |g, _, _| vec![Some(map.apply_transpose(c, g))]))
    }
}

#[derive(Clone, Copy)]
struct NormLayout {
    groups: usize,
    width: usize,
    group_stride: usize,
    elem_stride: usize,
}

pub(crate) fn transpose<T: Copy>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(x[r * cols + c]);
        }
    }
    out
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    leaves: Vec<Option<Vec<T>>>,
    named: HashMap<String, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.named.get(name).map(Vec::as_slice)
    }

    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn into_named(self) -> HashMap<String, Vec<T>> {
        self.named
    }
}
