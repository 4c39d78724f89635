//! The adapted plain ViT: 4-channel patch embedding, hybrid window/global
//! attention, transformer blocks and residual convolution necks.
//!
//! Parameter names (shapes for embed dim `D`, patch `P`, MLP hidden `M`):
//!
//! | name | shape |
//! |------|-------|
//! | `patch_embed.kernel` | `(D, 4, P, P)` |
//! | `patch_embed.bias` | `(D)` |
//! | `pos_embed` | `(gh0, gw0, D)` |
//! | `blocks.{i}.norm1.weight` / `.bias` | `(D)` |
//! | `blocks.{i}.attn.qkv.weight` / `.bias` | `(3D, D)` / `(3D)` |
//! | `blocks.{i}.attn.proj.weight` / `.bias` | `(D, D)` / `(D)` |
//! | `blocks.{i}.norm2.weight` / `.bias` | `(D)` |
//! | `blocks.{i}.mlp.fc1.weight` / `.bias` | `(M, D)` / `(M)` |
//! | `blocks.{i}.mlp.fc2.weight` / `.bias` | `(D, M)` / `(D)` |
//! | `necks.{g}.*` | see [`neck_specs`] |

use std::sync::Arc;

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::config::{AttentionKind, BackboneConfig, NeckKind};
use crate::error::{MatteError, Result};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::plane::{seeded_rng, MattingInput, Plane};
use crate::resample::Resampler;
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-6;
const VIT_INIT_STD: f64 = 0.02;

/// Row-major grid of token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<T = f32> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    /// `(grid_h * grid_w, dim)` row-major.
    pub values: Vec<T>,
}

impl<T: Real> TokenGrid<T> {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != grid_h * grid_w * dim {
            return Err(MatteError::ShapeMismatch(format!(
                "token grid {grid_h}x{grid_w}x{dim} needs {} values, got {}",
                grid_h * grid_w * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MatteError::NonFinite("token grid".into()));
        }
        Ok(Self { grid_h, grid_w, dim, values })
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, y: usize, x: usize) -> &[T] {
        let t = y * self.grid_w + x;
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.len(), self.dim], self.values.clone()).unwrap()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.grid_h, self.grid_w, self.dim), (other.grid_h, other.grid_w, other.dim));
        self.values.iter().zip(&other.values).map(|(a, b)| (a.f64() - b.f64()).abs()).fold(0.0, f64::max)
    }
}

/// Whether global blocks attend over all tokens or within 2x2 parity groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Normal,
    GridSample,
}

/// How tokens are padded, grouped for attention and cropped back.
#[derive(Debug, Clone)]
pub struct TokenLayout {
    pub padded: (usize, usize),
    /// For every padded token, the source token (`None` = zero token).
    pub pad_index: Arc<Vec<Option<usize>>>,
    /// For every original token, its position in the padded grid.
    pub crop_index: Arc<Vec<Option<usize>>>,
    /// Attention groups over padded token indices.
    pub groups: Arc<Vec<Vec<usize>>>,
}

impl TokenLayout {
    pub fn global(gh: usize, gw: usize) -> Self {
        let n = gh * gw;
        let ident: Arc<Vec<Option<usize>>> = Arc::new((0..n).map(Some).collect());
        Self { padded: (gh, gw), pad_index: ident.clone(), crop_index: ident, groups: Arc::new(vec![(0..n).collect()]) }
    }

    /// Non-overlapping `k x k` windows; the grid is zero-padded bottom/right
    /// to a multiple of `k`.
    pub fn window(gh: usize, gw: usize, k: usize) -> Self {
        let (ph, pw) = (gh.div_ceil(k) * k, gw.div_ceil(k) * k);
        let pad_index = (0..ph * pw)
            .map(|p| {
                let (y, x) = (p / pw, p % pw);
                (y < gh && x < gw).then_some(y * gw + x)
            })
            .collect();
        let mut groups = Vec::new();
        for wy in 0..ph / k {
            for wx in 0..pw / k {
                let mut g = Vec::with_capacity(k * k);
                for y in wy * k..(wy + 1) * k {
                    for x in wx * k..(wx + 1) * k {
                        g.push(y * pw + x);
                    }
                }
                groups.push(g);
            }
        }
        Self { padded: (ph, pw), pad_index: Arc::new(pad_index), crop_index: Arc::new(crop_index(gh, gw, pw)), groups: Arc::new(groups) }
    }

    /// Four groups by 2x2 parity: A = (even, even), B = (even, odd),
    /// C = (odd, even), D = (odd, odd). Odd grids are padded by replicating
    /// the last row/column.
    pub fn grid_sample(gh: usize, gw: usize) -> Self {
        let (ph, pw) = (gh + gh % 2, gw + gw % 2);
        let pad_index = (0..ph * pw)
            .map(|p| {
                let (y, x) = (p / pw, p % pw);
                Some(y.min(gh - 1) * gw + x.min(gw - 1))
            })
            .collect();
        let groups = (0..4)
            .map(|parity| {
                let (py, px) = (parity / 2, parity % 2);
                let mut g = Vec::with_capacity(ph * pw / 4);
                for y in (py..ph).step_by(2) {
                    for x in (px..pw).step_by(2) {
                        g.push(y * pw + x);
                    }
                }
                g
            })
            .collect();
        Self { padded: (ph, pw), pad_index: Arc::new(pad_index), crop_index: Arc::new(crop_index(gh, gw, pw)), groups: Arc::new(groups) }
    }

    pub fn for_block(gh: usize, gw: usize, kind: AttentionKind, mode: AttentionMode) -> Self {
        match (kind, mode) {
            (AttentionKind::Window(k), _) => Self::window(gh, gw, k),
            (AttentionKind::Global, AttentionMode::Normal) => Self::global(gh, gw),
            (AttentionKind::Global, AttentionMode::GridSample) => Self::grid_sample(gh, gw),
        }
    }

    fn is_identity(&self) -> bool {
        self.pad_index.len() == self.crop_index.len()
            && self.pad_index.iter().enumerate().all(|(i, p)| *p == Some(i))
    }
}

fn crop_index(gh: usize, gw: usize, pw: usize) -> Vec<Option<usize>> {
    (0..gh * gw).map(|t| Some((t / gw) * pw + t % gw)).collect()
}

/// Parameter declarations of the backbone (blocks, embeddings and necks).
pub fn backbone_specs(cfg: &BackboneConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let m = cfg.mlp_hidden();
    let tn = Init::TruncNormal(VIT_INIT_STD);
    let mut specs = vec![
        ParamSpec::weight("patch_embed.kernel", &[d, cfg.in_channels, p, p], tn),
        ParamSpec::no_decay("patch_embed.bias", &[d], Init::Zeros),
        ParamSpec::no_decay("pos_embed", &[cfg.pos_grid.0, cfg.pos_grid.1, d], tn),
    ];
    for i in 0..cfg.depth() {
        let b = format!("blocks.{i}");
        specs.extend([
            ParamSpec::no_decay(format!("{b}.norm1.weight"), &[d], Init::Ones),
            ParamSpec::no_decay(format!("{b}.norm1.bias"), &[d], Init::Zeros),
            ParamSpec::weight(format!("{b}.attn.qkv.weight"), &[3 * d, d], tn),
            ParamSpec::no_decay(format!("{b}.attn.qkv.bias"), &[3 * d], Init::Zeros),
            ParamSpec::weight(format!("{b}.attn.proj.weight"), &[d, d], tn),
            ParamSpec::no_decay(format!("{b}.attn.proj.bias"), &[d], Init::Zeros),
            ParamSpec::no_decay(format!("{b}.norm2.weight"), &[d], Init::Ones),
            ParamSpec::no_decay(format!("{b}.norm2.bias"), &[d], Init::Zeros),
            ParamSpec::weight(format!("{b}.mlp.fc1.weight"), &[m, d], tn),
            ParamSpec::no_decay(format!("{b}.mlp.fc1.bias"), &[m], Init::Zeros),
            ParamSpec::weight(format!("{b}.mlp.fc2.weight"), &[d, m], tn),
            ParamSpec::no_decay(format!("{b}.mlp.fc2.bias"), &[d], Init::Zeros),
        ]);
    }
    for g in 0..cfg.num_groups {
        specs.extend(neck_specs(cfg.neck_kind, d, g));
    }
    specs
}

/// Parameters of the neck after group `g`.
///
/// * naive: `conv` 3x3 `D->D`, `norm`
/// * residual: `conv1` 1x1 `D->D/2`, `conv2` 3x3, `conv3` 1x1 `D/2->D`, `norm1..3`
///   (`norm3.weight` starts at zero so a fresh neck is the identity)
/// * convnext: `dwconv` 7x7 depthwise, `norm`, `pwconv1` `D->4D`, `pwconv2` `4D->D`
pub fn neck_specs(kind: NeckKind, d: usize, g: usize) -> Vec<ParamSpec> {
    let n = format!("necks.{g}");
    let norm = |name: &str, width: usize, weight: Init| {
        [
            ParamSpec::no_decay(format!("{n}.{name}.weight"), &[width], weight),
            ParamSpec::no_decay(format!("{n}.{name}.bias"), &[width], Init::Zeros),
        ]
    };
    let conv = |name: &str, shape: &[usize]| ParamSpec::weight(format!("{n}.{name}.weight"), shape, Init::KaimingFanOut);
    match kind {
        NeckKind::None => Vec::new(),
        NeckKind::Naive => {
            let mut s = vec![conv("conv", &[d, d, 3, 3])];
            s.extend(norm("norm", d, Init::Ones));
            s
        }
        NeckKind::Residual => {
            let b = residual_bottleneck(d);
            let mut s = vec![conv("conv1", &[b, d, 1, 1])];
            s.extend(norm("norm1", b, Init::Ones));
            s.push(conv("conv2", &[b, b, 3, 3]));
            s.extend(norm("norm2", b, Init::Ones));
            s.push(conv("conv3", &[d, b, 1, 1]));
            s.extend(norm("norm3", d, Init::Zeros));
            s
        }
        NeckKind::Convnext => {
            let mut s = vec![
                conv("dwconv", &[d, 1, 7, 7]),
                ParamSpec::no_decay(format!("{n}.dwconv.bias"), &[d], Init::Zeros),
            ];
            s.extend(norm("norm", d, Init::Ones));
            s.extend([
                ParamSpec::weight(format!("{n}.pwconv1.weight"), &[4 * d, d, 1, 1], Init::TruncNormal(VIT_INIT_STD)),
                ParamSpec::no_decay(format!("{n}.pwconv1.bias"), &[4 * d], Init::Zeros),
                ParamSpec::weight(format!("{n}.pwconv2.weight"), &[d, 4 * d, 1, 1], Init::TruncNormal(VIT_INIT_STD)),
                ParamSpec::no_decay(format!("{n}.pwconv2.bias"), &[d], Init::Zeros),
            ]);
            s
        }
    }
}

/// Bottleneck width of the residual neck.
pub fn residual_bottleneck(d: usize) -> usize {
    (d / 2).max(1)
}

pub(crate) fn param<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    Ok(g.param(name, store.get(name)?))
}

/// Graph-level patch embedding: `(Cin, H, W)` -> tokens `(N, D)` with the
/// positional embedding added (bilinearly resized when the grid differs).
pub fn embed_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &BackboneConfig,
    x: Var,
) -> Result<(Var, (usize, usize))> {
    let [_, h, w] = *g.shape(x) else { unreachable!("planes are 3-D") };
    let p = cfg.patch_size;
    if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
        return Err(MatteError::IndivisibleResolution { height: h, width: w, divisor: p });
    }
    let (gh, gw) = (h / p, w / p);
    let kernel = param(g, store, "patch_embed.kernel")?;
    let cin = g.shape(x)[0];
    if g.shape(kernel)[1] != cin {
        return Err(MatteError::ShapeMismatch(format!(
            "patch kernel expects {} input channels, input has {cin}",
            g.shape(kernel)[1]
        )));
    }
    let bias = param(g, store, "patch_embed.bias")?;
    let d = g.shape(kernel)[0];
    let emb = g.conv2d(x, kernel, Some(bias), Conv2dSpec::patchify(p));
    let emb = g.reshape(emb, &[d, gh * gw]);
    let tokens = g.transpose(emb);
    let pos = param(g, store, "pos_embed")?;
    let [ph, pw, pd] = *g.shape(pos) else {
        return Err(MatteError::ShapeMismatch("pos_embed must be (gh, gw, D)".into()));
    };
    if pd != d {
        return Err(MatteError::ShapeMismatch(format!("pos_embed width {pd} vs embed dim {d}")));
    }
    let pos = if (ph, pw) == (gh, gw) {
        g.reshape(pos, &[gh * gw, d])
    } else {
        let flat = g.reshape(pos, &[ph * pw, d]);
        let chw = g.transpose(flat);
        let chw = g.reshape(chw, &[d, ph, pw]);
        let resized = g.resample(chw, Arc::new(Resampler::bilinear((ph, pw), (gh, gw))));
        let resized = g.reshape(resized, &[d, gh * gw]);
        g.transpose(resized)
    };
    Ok((g.add(tokens, pos), (gh, gw)))
}

/// Multi-head self-attention (qkv projection, grouped attention, output
/// projection) of block `block` on already-normalised tokens.
pub fn attention_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: usize,
    heads: usize,
    x: Var,
    layout: &TokenLayout,
) -> Result<Var> {
    let pre = format!("blocks.{block}.attn");
    let identity = layout.is_identity();
    let x = if identity { x } else { g.gather_rows(x, layout.pad_index.clone()) };
    let w = param(g, store, &format!("{pre}.qkv.weight"))?;
    let b = param(g, store, &format!("{pre}.qkv.bias"))?;
    let qkv = g.linear(x, w, Some(b));
    let a = g.grouped_attention(qkv, layout.groups.clone(), heads);
    let a = if identity { a } else { g.gather_rows(a, layout.crop_index.clone()) };
    let w = param(g, store, &format!("{pre}.proj.weight"))?;
    let b = param(g, store, &format!("{pre}.proj.bias"))?;
    Ok(g.linear(a, w, Some(b)))
}

/// One transformer block: `x + MHSA(LN(x))`, then `x' + MLP(LN(x'))`.
pub fn block_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: usize,
    heads: usize,
    x: Var,
    layout: &TokenLayout,
) -> Result<Var> {
    let pre = format!("blocks.{block}");
    let n1w = param(g, store, &format!("{pre}.norm1.weight"))?;
    let n1b = param(g, store, &format!("{pre}.norm1.bias"))?;
    let h = g.layer_norm(x, n1w, n1b, LN_EPS);
    let a = attention_graph(g, store, block, heads, h, layout)?;
    let x = g.add(x, a);
    let n2w = param(g, store, &format!("{pre}.norm2.weight"))?;
    let n2b = param(g, store, &format!("{pre}.norm2.bias"))?;
    let h = g.layer_norm(x, n2w, n2b, LN_EPS);
    let w1 = param(g, store, &format!("{pre}.mlp.fc1.weight"))?;
    let b1 = param(g, store, &format!("{pre}.mlp.fc1.bias"))?;
    let h = g.linear(h, w1, Some(b1));
    let h = g.gelu(h);
    let w2 = param(g, store, &format!("{pre}.mlp.fc2.weight"))?;
    let b2 = param(g, store, &format!("{pre}.mlp.fc2.bias"))?;
    let h = g.linear(h, w2, Some(b2));
    Ok(g.add(x, h))
}

fn conv_norm<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    conv: &str,
    norm: &str,
    spec: Conv2dSpec,
) -> Result<Var> {
    let w = param(g, store, &format!("{conv}.weight"))?;
    let y = g.conv2d(x, w, None, spec);
    let nw = param(g, store, &format!("{norm}.weight"))?;
    let nb = param(g, store, &format!("{norm}.bias"))?;
    Ok(g.channel_norm(y, nw, nb, LN_EPS))
}

/// Neck after group `group`: tokens are viewed as a `(D, gh, gw)` map, sent
/// through the block and added back (identity residual).
pub fn neck_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    kind: NeckKind,
    group: usize,
    x: Var,
    grid: (usize, usize),
) -> Result<Var> {
    if kind == NeckKind::None {
        return Ok(x);
    }
    let [n, d] = *g.shape(x) else { unreachable!("tokens are 2-D") };
    let pre = format!("necks.{group}");
    let t = g.transpose(x);
    let map = g.reshape(t, &[d, grid.0, grid.1]);
    let y = match kind {
        NeckKind::None => unreachable!(),
        NeckKind::Naive => {
            let y = conv_norm(g, store, map, &format!("{pre}.conv"), &format!("{pre}.norm"), Conv2dSpec::same(3))?;
            g.relu(y)
        }
        NeckKind::Residual => {
            let y = conv_norm(g, store, map, &format!("{pre}.conv1"), &format!("{pre}.norm1"), Conv2dSpec::same(1))?;
            let y = g.relu(y);
            let y = conv_norm(g, store, y, &format!("{pre}.conv2"), &format!("{pre}.norm2"), Conv2dSpec::same(3))?;
            let y = g.relu(y);
            conv_norm(g, store, y, &format!("{pre}.conv3"), &format!("{pre}.norm3"), Conv2dSpec::same(1))?
        }
        NeckKind::Convnext => {
            let w = param(g, store, &format!("{pre}.dwconv.weight"))?;
            let b = param(g, store, &format!("{pre}.dwconv.bias"))?;
            let y = g.conv2d(map, w, Some(b), Conv2dSpec::depthwise(7, d));
            let nw = param(g, store, &format!("{pre}.norm.weight"))?;
            let nb = param(g, store, &format!("{pre}.norm.bias"))?;
            let y = g.channel_norm(y, nw, nb, LN_EPS);
            let w = param(g, store, &format!("{pre}.pwconv1.weight"))?;
            let b = param(g, store, &format!("{pre}.pwconv1.bias"))?;
            let y = g.conv2d(y, w, Some(b), Conv2dSpec::same(1));
            let y = g.gelu(y);
            let w = param(g, store, &format!("{pre}.pwconv2.weight"))?;
            let b = param(g, store, &format!("{pre}.pwconv2.bias"))?;
            g.conv2d(y, w, Some(b), Conv2dSpec::same(1))
        }
    };
    let y = g.reshape(y, &[d, n]);
    let y = g.transpose(y);
    Ok(g.add(x, y))
}

/// Full backbone on a `(Cin, H, W)` input. Returns tokens `(N, D)` and the grid.
pub fn backbone_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &BackboneConfig,
    x: Var,
    mode: AttentionMode,
) -> Result<(Var, (usize, usize))> {
    let (mut tokens, grid) = embed_graph(g, store, cfg, x)?;
    let schedule = cfg.schedule();
    let mut layouts: Vec<(AttentionKind, TokenLayout)> = Vec::new();
    for (i, &kind) in schedule.kinds().iter().enumerate() {
        let layout = match layouts.iter().find(|(k, _)| *k == kind) {
            Some((_, l)) => l.clone(),
            None => {
                let l = TokenLayout::for_block(grid.0, grid.1, kind, mode);
                layouts.push((kind, l.clone()));
                l
            }
        };
        tokens = block_graph(g, store, i, cfg.num_heads, tokens, &layout)?;
        if cfg.neck_kind != NeckKind::None && (i + 1) % cfg.blocks_per_group == 0 {
            tokens = neck_graph(g, store, cfg.neck_kind, i / cfg.blocks_per_group, tokens, grid)?;
        }
    }
    Ok((tokens, grid))
}

/// Reshapes tokens `(N, D)` into the stride-`P` feature map `(D, gh, gw)`.
pub fn tokens_to_map<T: Real>(g: &mut Graph<T>, tokens: Var, grid: (usize, usize)) -> Var {
    let d = g.shape(tokens)[1];
    let t = g.transpose(tokens);
    g.reshape(t, &[d, grid.0, grid.1])
}

fn tokens_from<T: Real>(g: &Graph<T>, v: Var, grid: (usize, usize)) -> TokenGrid<T> {
    let d = g.shape(v)[1];
    TokenGrid::new(grid.0, grid.1, d, g.value(v).data().to_vec()).expect("graph values are finite")
}

/// Patch embedding of a validated input.
pub fn patch_embed<T: Real>(input: &MattingInput<T>, store: &ParamStore<T>, cfg: &BackboneConfig) -> Result<TokenGrid<T>> {
    let mut g = Graph::inference();
    let x = g.constant(input.stacked().to_tensor());
    let (tokens, grid) = embed_graph(&mut g, store, cfg, x)?;
    Ok(tokens_from(&g, tokens, grid))
}

/// Attention of block `block` applied directly to `tokens` (no LayerNorm,
/// no residual).
pub fn attention<T: Real>(
    tokens: &TokenGrid<T>,
    kind: AttentionKind,
    store: &ParamStore<T>,
    block: usize,
    heads: usize,
) -> Result<TokenGrid<T>> {
    let mut g = Graph::inference();
    let x = g.constant(tokens.to_tensor());
    let layout = TokenLayout::for_block(tokens.grid_h, tokens.grid_w, kind, AttentionMode::Normal);
    let y = attention_graph(&mut g, store, block, heads, x, &layout)?;
    Ok(tokens_from(&g, y, (tokens.grid_h, tokens.grid_w)))
}

pub fn transformer_block<T: Real>(
    tokens: &TokenGrid<T>,
    store: &ParamStore<T>,
    block: usize,
    heads: usize,
    kind: AttentionKind,
) -> Result<TokenGrid<T>> {
    let mut g = Graph::inference();
    let x = g.constant(tokens.to_tensor());
    let layout = TokenLayout::for_block(tokens.grid_h, tokens.grid_w, kind, AttentionMode::Normal);
    let y = block_graph(&mut g, store, block, heads, x, &layout)?;
    Ok(tokens_from(&g, y, (tokens.grid_h, tokens.grid_w)))
}

pub fn conv_neck<T: Real>(
    tokens: &TokenGrid<T>,
    store: &ParamStore<T>,
    group: usize,
    kind: NeckKind,
) -> Result<TokenGrid<T>> {
    let mut g = Graph::inference();
    let x = g.constant(tokens.to_tensor());
    let y = neck_graph(&mut g, store, kind, group, x, (tokens.grid_h, tokens.grid_w))?;
    Ok(tokens_from(&g, y, (tokens.grid_h, tokens.grid_w)))
}

/// Stride-`P` feature map `(D, H/P, W/P)` of an arbitrary-channel plane stack.
pub fn backbone_forward_planes<T: Real>(
    planes: &Plane<T>,
    store: &ParamStore<T>,
    cfg: &BackboneConfig,
    mode: AttentionMode,
) -> Result<Plane<T>> {
    let mut g = Graph::inference();
    let x = g.constant(planes.to_tensor());
    let (tokens, grid) = backbone_graph(&mut g, store, cfg, x, mode)?;
    let map = tokens_to_map(&mut g, tokens, grid);
    Plane::from_tensor(g.take_value(map))
}

/// Backbone feature map of a matting input.
pub fn backbone_forward<T: Real>(input: &MattingInput<T>, store: &ParamStore<T>, cfg: &BackboneConfig) -> Result<Plane<T>> {
    backbone_forward_planes(&input.stacked(), store, cfg, AttentionMode::Normal)
}

/// Builds 4-channel backbone weights from a 3-channel pretrained plain ViT.
///
/// The pretrained RGB kernel slices are copied verbatim and the trimap slice
/// is zero; necks (and anything else the pretrained archive lacks by design)
/// are drawn from `seed`. A positional embedding trained at another grid is
/// bilinearly resized to `cfg.pos_grid`.
pub fn init_from_pretrained<T: Real>(pretrained: &ParamStore<T>, cfg: &BackboneConfig, seed: u64) -> Result<ParamStore<T>> {
    let specs = backbone_specs(cfg);
    let mut out = ParamStore::initialize(&specs, &mut seeded_rng(seed));
    let (d, p) = (cfg.embed_dim, cfg.patch_size);

    let kernel = pretrained.get("patch_embed.kernel")?;
    if kernel.shape() != [d, 3, p, p] {
        return Err(MatteError::ShapeMismatch(format!(
            "pretrained patch kernel {:?}, expected {:?}",
            kernel.shape(),
            [d, 3, p, p]
        )));
    }
    let cin = cfg.in_channels;
    let mut mapped = vec![T::zero(); d * cin * p * p];
    for o in 0..d {
        let src = &kernel.data()[o * 3 * p * p..(o + 1) * 3 * p * p];
        mapped[o * cin * p * p..o * cin * p * p + 3 * p * p].copy_from_slice(src);
    }
    out.insert("patch_embed.kernel", Tensor::new(vec![d, cin, p, p], mapped)?);

    let pos = pretrained.get("pos_embed")?;
    let [ph, pw, pd] = *pos.shape() else {
        return Err(MatteError::ShapeMismatch(format!("pretrained pos_embed {:?}", pos.shape())));
    };
    if pd != d {
        return Err(MatteError::ShapeMismatch(format!("pretrained pos_embed width {pd}, expected {d}")));
    }
    let (gh, gw) = cfg.pos_grid;
    let resized = if (ph, pw) == (gh, gw) {
        pos.clone()
    } else {
        let chw = crate::autodiff::transpose(ph * pw, d, pos.data());
        let r = Resampler::bilinear((ph, pw), (gh, gw)).apply(d, &chw);
        Tensor::new(vec![gh, gw, d], crate::autodiff::transpose(d, gh * gw, &r))?
    };
    out.insert("pos_embed", resized);

    for spec in &specs {
        let vit_part = spec.name.starts_with("blocks.") || spec.name == "patch_embed.bias";
        if !vit_part {
            continue;
        }
        let t = pretrained.get(&spec.name)?;
        if t.shape() != spec.shape.as_slice() {
            return Err(MatteError::ShapeMismatch(format!(
                "pretrained {}: {:?}, expected {:?}",
                spec.name,
                t.shape(),
                spec.shape
            )));
        }
        out.insert(&spec.name, t.clone());
    }
    Ok(out)
}

/// Specs of a plain 3-channel ViT matching `cfg` (no necks).
pub fn plain_vit_specs(cfg: &BackboneConfig) -> Vec<ParamSpec> {
    let plain = BackboneConfig { in_channels: 3, neck_kind: NeckKind::None, ..cfg.clone() };
    backbone_specs(&plain)
}
