//! Detail capture: the ConvStream producing D0..Dn and the fusion decoder
//! that brings the stride-`P` backbone map back to full resolution.
//!
//! Parameter names:
//!
//! | name | shape |
//! |------|-------|
//! | `convstream.0.conv.weight` | `(c0, 4, 3, 3)` stride 1 |
//! | `convstream.{i}.conv.weight` | `(ci, c(i-1), 3, 3)` stride 2 |
//! | `convstream.{i}.norm.weight` / `.bias` | `(ci)` |
//! | `fusion.{j}.conv.weight` | `(fj, f(j-1) + c(level), 3, 3)` |
//! | `fusion.{j}.norm.weight` / `.bias` | `(fj)` |
//! | `head.conv.weight` / `.bias` | `(1, f_last, 3, 3)` / `(1)` |
//!
//! Fusion stage `j` runs coarsest first and fuses detail level
//! `stages - 1 - j`; `f(-1)` is the backbone width.

use std::sync::Arc;

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::backbone::{param, LN_EPS};
use crate::config::DecoderConfig;
use crate::error::{MatteError, Result};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::plane::{MattingInput, Plane};
use crate::resample::Resampler;
use crate::tensor::Real;

/// Single-channel alpha in `[0, 1]` at input resolution.
pub type AlphaMatte<T = f32> = Plane<T>;

/// Detail maps, finest (D0, stride 1) first.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailFeatures<T = f32> {
    pub maps: Vec<Plane<T>>,
}

pub fn decoder_specs(dec: &DecoderConfig, embed_dim: usize, in_channels: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let norm = |specs: &mut Vec<ParamSpec>, pre: &str, c: usize| {
        specs.push(ParamSpec::no_decay(format!("{pre}.norm.weight"), &[c], Init::Ones));
        specs.push(ParamSpec::no_decay(format!("{pre}.norm.bias"), &[c], Init::Zeros));
    };
    let mut prev = in_channels;
    for level in 0..dec.used_levels() {
        let c = dec.detail_channels[level];
        let pre = format!("convstream.{level}");
        specs.push(ParamSpec::weight(format!("{pre}.conv.weight"), &[c, prev, 3, 3], Init::KaimingFanOut));
        norm(&mut specs, &pre, c);
        prev = c;
    }
    let stages = dec.stages();
    let mut width = embed_dim;
    for j in 0..stages {
        let skip = dec.detail_width(stages - 1 - j).unwrap_or(0);
        let out = dec.fusion_channels[j];
        let pre = format!("fusion.{j}");
        specs.push(ParamSpec::weight(format!("{pre}.conv.weight"), &[out, width + skip, 3, 3], Init::KaimingFanOut));
        norm(&mut specs, &pre, out);
        width = out;
    }
    specs.push(ParamSpec::weight("head.conv.weight", &[1, width, 3, 3], Init::KaimingFanOut));
    specs.push(ParamSpec::no_decay("head.conv.bias", &[1], Init::Zeros));
    specs
}

fn conv_norm_relu<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    pre: &str,
    x: Var,
    spec: Conv2dSpec,
) -> Result<Var> {
    let w = param(g, store, &format!("{pre}.conv.weight"))?;
    let y = g.conv2d(x, w, None, spec);
    let nw = param(g, store, &format!("{pre}.norm.weight"))?;
    let nb = param(g, store, &format!("{pre}.norm.bias"))?;
    let y = g.channel_norm(y, nw, nb, LN_EPS);
    Ok(g.relu(y))
}

/// `(Cin, H, W)` -> detail maps at strides 1, 2, 4, ...
pub fn conv_stream_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    dec: &DecoderConfig,
    x: Var,
) -> Result<Vec<Var>> {
    let mut maps = Vec::with_capacity(dec.used_levels());
    let mut cur = x;
    for level in 0..dec.used_levels() {
        let spec = if level == 0 { Conv2dSpec::same(3) } else { Conv2dSpec::strided(3, 2) };
        cur = conv_norm_relu(g, store, &format!("convstream.{level}"), cur, spec)?;
        maps.push(cur);
    }
    Ok(maps)
}

/// Upsample ⊕ concat ⊕ conv3x3 of fusion stage `stage`, before norm and ReLU.
pub fn fuse_linear_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    stage: usize,
    f: Var,
    detail: Option<Var>,
) -> Result<Var> {
    let [_, h, w] = *g.shape(f) else { unreachable!("maps are 3-D") };
    let up = g.resample(f, Arc::new(Resampler::bilinear((h, w), (2 * h, 2 * w))));
    let x = match detail {
        Some(d) => {
            let ds = g.shape(d);
            if ds[1] != 2 * h || ds[2] != 2 * w {
                return Err(MatteError::ShapeMismatch(format!(
                    "fusion stage {stage}: feature {h}x{w} needs detail {}x{}, got {}x{}",
                    2 * h,
                    2 * w,
                    ds[1],
                    ds[2]
                )));
            }
            g.concat_channels(up, d)
        }
        None => up,
    };
    let wt = param(g, store, &format!("fusion.{stage}.conv.weight"))?;
    Ok(g.conv2d(x, wt, None, Conv2dSpec::same(3)))
}

pub fn fuse_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    stage: usize,
    f: Var,
    detail: Option<Var>,
) -> Result<Var> {
    let y = fuse_linear_graph(g, store, stage, f, detail)?;
    let nw = param(g, store, &format!("fusion.{stage}.norm.weight"))?;
    let nb = param(g, store, &format!("fusion.{stage}.norm.bias"))?;
    let y = g.channel_norm(y, nw, nb, LN_EPS);
    Ok(g.relu(y))
}

/// Fusion chain plus matting head; returns alpha `(1, H, W)`.
pub fn decode_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    dec: &DecoderConfig,
    features: Var,
    details: &[Var],
) -> Result<Var> {
    let stages = dec.stages();
    let mut cur = features;
    for j in 0..stages {
        let level = stages - 1 - j;
        cur = fuse_graph(g, store, j, cur, details.get(level).copied())?;
    }
    let w = param(g, store, "head.conv.weight")?;
    let b = param(g, store, "head.conv.bias")?;
    let logits = g.conv2d(cur, w, Some(b), Conv2dSpec::same(3));
    Ok(g.sigmoid(logits))
}

pub fn conv_stream<T: Real>(input: &MattingInput<T>, store: &ParamStore<T>, dec: &DecoderConfig) -> Result<DetailFeatures<T>> {
    let mut g = Graph::inference();
    let x = g.constant(input.stacked().to_tensor());
    let vars = conv_stream_graph(&mut g, store, dec, x)?;
    let maps = vars.into_iter().map(|v| Plane::from_tensor(g.value(v).clone())).collect::<Result<_>>()?;
    Ok(DetailFeatures { maps })
}

/// One fusion stage on plain planes; `detail` must be exactly twice the
/// resolution of `f`.
pub fn fuse<T: Real>(f: &Plane<T>, detail: &Plane<T>, store: &ParamStore<T>, stage: usize) -> Result<Plane<T>> {
    let mut g = Graph::inference();
    let fv = g.constant(f.to_tensor());
    let dv = g.constant(detail.to_tensor());
    let y = fuse_graph(&mut g, store, stage, fv, Some(dv))?;
    Plane::from_tensor(g.take_value(y))
}

pub fn decode<T: Real>(
    features: &Plane<T>,
    details: &DetailFeatures<T>,
    store: &ParamStore<T>,
    dec: &DecoderConfig,
) -> Result<AlphaMatte<T>> {
    let mut g = Graph::inference();
    let f = g.constant(features.to_tensor());
    let d: Vec<Var> = details.maps.iter().map(|m| g.constant(m.to_tensor())).collect();
    let a = decode_graph(&mut g, store, dec, f, &d)?;
    Plane::from_tensor(g.take_value(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::random;
    use crate::plane::seeded_rng;
    use crate::tensor::Tensor;

    fn store(dec: &DecoderConfig, d: usize) -> ParamStore<f64> {
        ParamStore::initialize(&decoder_specs(dec, d, 4), &mut seeded_rng(3))
    }

    fn input(h: usize, w: usize) -> MattingInput<f64> {
        let img = Plane::from_fn(3, h, w, |c, y, x| ((c + 2 * y + 3 * x) % 11) as f64 / 10.0).unwrap();
        let tri = Plane::from_fn(1, h, w, |_, y, x| [0.0, 0.5, 1.0][(x + y) % 3]).unwrap();
        MattingInput::new(img, tri).unwrap()
    }

    #[test]
    fn stream_resolutions() {
        let dec = DecoderConfig::vit_s();
        let s = store(&dec, 384);
        let feats = conv_stream(&input(64, 64), &s, &dec).unwrap();
        let dims: Vec<_> = feats.maps.iter().map(|m| (m.channels(), m.height(), m.width())).collect();
        assert_eq!(dims, vec![(32, 64, 64), (48, 32, 32), (96, 16, 16), (192, 8, 8)]);
    }

    #[test]
    fn zero_stream_weights_give_zero_features() {
        let dec = DecoderConfig::tiny();
        let mut s = store(&dec, 32);
        for level in 0..3 {
            let name = format!("convstream.{level}.conv.weight");
            let shape = s.get(&name).unwrap().shape().to_vec();
            s.insert(&name, Tensor::zeros(&shape));
        }
        let feats = conv_stream(&input(32, 32), &s, &dec).unwrap();
        assert!(feats.maps.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn vit_s_detail_capture_budget() {
        let n: usize = decoder_specs(&DecoderConfig::vit_s(), 384, 4).iter().map(ParamSpec::numel).sum();
        assert!(n < 3_000_000, "{n}");
        assert!(n > 1_500_000, "{n}");
    }

    #[test]
    fn fuse_shapes_and_mismatch() {
        let dec = DecoderConfig::vit_s();
        let s = store(&dec, 384);
        let f = Plane::from_tensor(random(&[384, 4, 4], 1)).unwrap();
        let d = Plane::from_tensor(random(&[192, 8, 8], 2)).unwrap();
        let out = fuse(&f, &d, &s, 0).unwrap();
        assert_eq!((out.channels(), out.height(), out.width()), (256, 8, 8));
        let bad = Plane::from_tensor(random(&[192, 6, 8], 2)).unwrap();
        assert!(matches!(fuse(&f, &bad, &s, 0), Err(MatteError::ShapeMismatch(_))));
    }

    #[test]
    fn upsampling_preserves_constants() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::filled(&[2, 3, 5], 0.37));
        let y = g.resample(x, Arc::new(Resampler::bilinear((3, 5), (6, 10))));
        assert!(g.value(y).data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn fuse_is_linear_before_normalisation() {
        let dec = DecoderConfig::tiny();
        let s = store(&dec, 32);
        let (f1, d1) = (random(&[32, 4, 4], 5), random(&[32, 8, 8], 6));
        let (f2, d2) = (random(&[32, 4, 4], 7), random(&[32, 8, 8], 8));
        let run = |f: &Tensor<f64>, d: &Tensor<f64>| {
            let mut g = Graph::inference();
            let fv = g.constant(f.clone());
            let dv = g.constant(d.clone());
            let y = fuse_linear_graph(&mut g, &s, 0, fv, Some(dv)).unwrap();
            g.take_value(y)
        };
        let comb = |a: &Tensor<f64>, b: &Tensor<f64>| {
            Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| 2.0 * x - 0.5 * y).collect()).unwrap()
        };
        let lhs = run(&comb(&f1, &f2), &comb(&d1, &d2));
        let rhs = comb(&run(&f1, &d1), &run(&f2, &d2));
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn decode_reaches_input_resolution_in_unit_range() {
        let dec = DecoderConfig::vit_s();
        let s = store(&dec, 384);
        for (h, w) in [(64, 64), (96, 64)] {
            let details = conv_stream(&input(h, w), &s, &dec).unwrap();
            let f = Plane::from_tensor(random(&[384, h / 16, w / 16], 9)).unwrap();
            let a = decode(&f, &details, &s, &dec).unwrap();
            assert_eq!((a.channels(), a.height(), a.width()), (1, h, w));
            assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn truncated_chains_are_constructible() {
        for levels in [0, 2, 3] {
            let dec = DecoderConfig { detail_levels: Some(levels), ..DecoderConfig::vit_s() };
            let s = store(&dec, 384);
            let details = conv_stream(&input(32, 32), &s, &dec).unwrap();
            assert_eq!(details.maps.len(), levels);
            let f = Plane::from_tensor(random(&[384, 2, 2], 10)).unwrap();
            let a = decode(&f, &details, &s, &dec).unwrap();
            assert_eq!(a.dims(), (32, 32));
        }
    }
}
