//! Analytical FLOPs, parameter and activation-memory accounting.
//!
//! Counting convention: a multiply-accumulate is two FLOPs, every
//! norm/activation/softmax element costs five, and bias or residual adds cost
//! one per output element. Bilinear upsampling counts four MACs per output
//! element. Both `macs` and `flops` are reported; ratios barely move between
//! them.
//!
//! Memory is counted in f32 bytes for an inference pass that keeps only what
//! is still needed: the input image during the backbone, the detail maps
//! during the fusion chain, and each stage's working set.

use serde::{Deserialize, Serialize};

use crate::backbone::{residual_bottleneck, AttentionMode, TokenLayout};
use crate::config::{AttentionKind, ModelConfig, NeckKind};
use crate::error::{MatteError, Result};

const BYTES: u64 = 4;
const ELEMENTWISE_FLOPS: u64 = 5;
/// Width of the pyramid convolutions in the simple-feature-pyramid decoder.
pub const SFP_WIDTH: usize = 256;

/// Which decoder the cost is computed for. The simple feature pyramid exists
/// only here, as a comparison point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    #[default]
    DetailCapture,
    SimpleFeaturePyramid,
}

impl std::str::FromStr for DecoderKind {
    type Err = MatteError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dcm" | "detail_capture" => Ok(Self::DetailCapture),
            "sfp" | "simple_feature_pyramid" => Ok(Self::SimpleFeaturePyramid),
            other => Err(MatteError::Config(format!("unknown decoder kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub name: String,
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
    /// Live activation bytes while this stage runs (retained maps included).
    pub activation_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub resolution: (usize, usize),
    pub decoder: DecoderKind,
    pub mode: AttentionMode,
    pub flops: u64,
    pub macs: u64,
    pub params: u64,
    /// Largest attention working set (q/k/v, scores, probabilities, output).
    pub peak_attention_activation_bytes: u64,
    /// Largest live activation footprint over all stages.
    pub peak_activation_bytes: u64,
    pub weight_bytes: u64,
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    /// Predicted inference memory: weights plus peak activations.
    pub fn peak_memory_bytes(&self) -> u64 {
        self.weight_bytes + self.peak_activation_bytes
    }

    /// Sum over entries whose name starts with `prefix`.
    pub fn flops_of(&self, prefix: &str) -> u64 {
        self.entries.iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.flops).sum()
    }

    pub fn macs_of(&self, prefix: &str) -> u64 {
        self.entries.iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.macs).sum()
    }

    pub fn params_of(&self, prefix: &str) -> u64 {
        self.entries.iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.params).sum()
    }
}

/// Attention cost by formula: `4NC²` projections plus `2N²C` (global) or
/// `2N·k²·C` (window) for scores and the weighted sum. `heads` does not change
/// the count. `N` is taken as given (already padded).
pub fn attention_flops(n: usize, c: usize, heads: usize, kind: AttentionKind) -> u64 {
    let _ = heads;
    let (n, c) = (n as u64, c as u64);
    let proj = 4 * n * c * c;
    match kind {
        AttentionKind::Global => proj + 2 * n * n * c,
        AttentionKind::Window(k) => proj + 2 * n * (k * k) as u64 * c,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMemory {
    /// Tokens after padding.
    pub tokens: usize,
    pub score_bytes: u64,
    /// Scores, probabilities, q/k/v and the attention output.
    pub total_bytes: u64,
}

/// Memory of one global attention layer on a `gh x gw` token grid. Grid
/// sampling pads to even dims and splits into four parity groups.
pub fn attention_memory(grid: (usize, usize), c: usize, heads: usize, mode: AttentionMode) -> AttentionMemory {
    let layout = TokenLayout::for_block(grid.0, grid.1, AttentionKind::Global, mode);
    let tokens = layout.padded.0 * layout.padded.1;
    let pairs: u64 = layout.groups.iter().map(|g| u(g.len()) * u(g.len())).sum();
    let score_bytes = u(heads) * pairs * BYTES;
    let planes = 4 * u(tokens) * u(c) * BYTES;
    AttentionMemory { tokens, score_bytes, total_bytes: 2 * score_bytes + planes }
}

// Counts are kept in u64 throughout so 32-bit targets do not overflow.
fn u(v: usize) -> u64 {
    v as u64
}

#[derive(Default)]
struct Tally {
    macs: u64,
    elementwise: u64,
    adds: u64,
    params: u64,
}

impl Tally {
    fn flops(&self) -> u64 {
        2 * self.macs + ELEMENTWISE_FLOPS * self.elementwise + self.adds
    }

    fn linear(&mut self, rows: u64, cin: u64, cout: u64, bias: bool) {
        self.conv(rows, cin, cout, 1, 1, bias);
    }

    /// `pixels` output positions of a `k x k` convolution.
    fn conv(&mut self, pixels: u64, cin: u64, cout: u64, k: u64, groups: u64, bias: bool) {
        let per_out = cin / groups * k * k;
        self.macs += pixels * cout * per_out;
        self.params += cout * per_out;
        if bias {
            self.params += cout;
            self.adds += pixels * cout;
        }
    }

    fn norm(&mut self, elements: u64, channels: u64) {
        self.elementwise += elements;
        self.params += 2 * channels;
    }

    fn act(&mut self, elements: u64) {
        self.elementwise += elements;
    }

    fn add(&mut self, elements: u64) {
        self.adds += elements;
    }

    fn upsample(&mut self, out_elements: u64) {
        self.macs += 4 * out_elements;
    }
}

struct Builder {
    entries: Vec<CostEntry>,
    peak_attention: u64,
}

impl Builder {
    fn push(&mut self, name: String, t: Tally, activation_bytes: u64) {
        self.entries.push(CostEntry { name, macs: t.macs, flops: t.flops(), params: t.params, activation_bytes });
    }
}

fn bytes(elements: u64) -> u64 {
    elements * BYTES
}

/// Full cost of `cfg` at `res = (H, W)` with the given decoder and attention
/// mode.
pub fn model_flops(cfg: &ModelConfig, decoder: DecoderKind, res: (usize, usize), mode: AttentionMode) -> Result<CostReport> {
    cfg.validate()?;
    let bb = &cfg.backbone;
    let p = bb.patch_size;
    let (h, w) = res;
    if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
        return Err(MatteError::IndivisibleResolution { height: h, width: w, divisor: p });
    }
    let (gh, gw) = (h / p, w / p);
    let n = u(gh) * u(gw);
    let c = u(bb.embed_dim);
    let hidden = u(bb.mlp_hidden());
    let heads = u(bb.num_heads);
    let cin = u(bb.in_channels);
    let input = bytes(cin * u(h) * u(w));
    let mut b = Builder { entries: Vec::new(), peak_attention: 0 };

    let mut t = Tally::default();
    t.conv(n, cin, c, u(p), 1, true);
    t.params += u(bb.pos_grid.0) * u(bb.pos_grid.1) * c;
    if bb.pos_grid != (gh, gw) {
        t.upsample(n * c);
    }
    t.add(n * c);
    b.push("patch_embed".into(), t, input + 2 * bytes(n * c));

    let tokens = bytes(n * c);
    for (i, &kind) in bb.schedule().kinds().iter().enumerate() {
        let layout = TokenLayout::for_block(gh, gw, kind, mode);
        let padded = u(layout.padded.0) * u(layout.padded.1);
        let pairs: u64 = layout.groups.iter().map(|g| u(g.len()) * u(g.len())).sum();
        let mut t = Tally::default();
        t.norm(n * c, c);
        t.linear(padded, c, 3 * c, true);
        t.macs += 2 * pairs * c;
        t.act(heads * pairs);
        t.linear(n, c, c, true);
        t.add(n * c);
        t.norm(n * c, c);
        t.linear(n, c, hidden, true);
        t.act(n * hidden);
        t.linear(n, hidden, c, true);
        t.add(n * c);
        let attn = 2 * bytes(heads * pairs) + bytes(3 * padded * c) + bytes(padded * c);
        b.peak_attention = b.peak_attention.max(attn);
        let mlp = 2 * bytes(n * hidden) + tokens;
        let label = match kind {
            AttentionKind::Global => "global",
            AttentionKind::Window(_) => "window",
        };
        b.push(format!("blocks.{i}.{label}"), t, input + 2 * tokens + attn.max(mlp));

        if bb.neck_kind != NeckKind::None && (i + 1) % bb.blocks_per_group == 0 {
            let g = i / bb.blocks_per_group;
            let (t, live) = neck_cost(bb.neck_kind, n, c);
            b.push(format!("necks.{g}"), t, input + 2 * tokens + live);
        }
    }

    match decoder {
        DecoderKind::DetailCapture => detail_capture_cost(&mut b, cfg, res, tokens),
        DecoderKind::SimpleFeaturePyramid => pyramid_cost(&mut b, cfg, res, tokens),
    }

    let Builder { entries, peak_attention } = b;
    let params: u64 = entries.iter().map(|e| e.params).sum();
    Ok(CostReport {
        resolution: res,
        decoder,
        mode,
        flops: entries.iter().map(|e| e.flops).sum(),
        macs: entries.iter().map(|e| e.macs).sum(),
        params,
        peak_attention_activation_bytes: peak_attention,
        peak_activation_bytes: entries.iter().map(|e| e.activation_bytes).max().unwrap_or(0),
        weight_bytes: params * BYTES,
        entries,
    })
}

/// Neck cost on an `n`-token map of width `c`, plus its live working set.
fn neck_cost(kind: NeckKind, n: u64, c: u64) -> (Tally, u64) {
    let mut t = Tally::default();
    let live = match kind {
        NeckKind::None => 0,
        NeckKind::Naive => {
            t.conv(n, c, c, 3, 1, false);
            t.norm(n * c, c);
            t.act(n * c);
            2 * bytes(n * c)
        }
        NeckKind::Residual => {
            let m = u(residual_bottleneck(c as usize));
            t.conv(n, c, m, 1, 1, false);
            t.norm(n * m, m);
            t.act(n * m);
            t.conv(n, m, m, 3, 1, false);
            t.norm(n * m, m);
            t.act(n * m);
            t.conv(n, m, c, 1, 1, false);
            t.norm(n * c, c);
            2 * bytes(n * m) + bytes(n * c)
        }
        NeckKind::Convnext => {
            t.conv(n, c, c, 7, c, true);
            t.norm(n * c, c);
            t.conv(n, c, 4 * c, 1, 1, true);
            t.act(4 * n * c);
            t.conv(n, 4 * c, c, 1, 1, true);
            2 * bytes(n * c) + bytes(4 * n * c)
        }
    };
    t.add(n * c);
    (t, live)
}

fn conv_norm_relu(t: &mut Tally, pixels: u64, cin: u64, cout: u64, k: u64) {
    t.conv(pixels, cin, cout, k, 1, false);
    t.norm(pixels * cout, cout);
    t.act(pixels * cout);
}

/// Output positions at stride `2^level`.
fn pixels_at(res: (usize, usize), level: usize) -> u64 {
    let scale = 1usize << level;
    u(res.0 / scale) * u(res.1 / scale)
}

/// ConvStream levels followed by the fusion chain and head. `skips[level]`
/// is the width of the map fused at stride `2^level` (0 = none); `retained`
/// is what stays alive during the chain.
fn fusion_chain(b: &mut Builder, cfg: &ModelConfig, res: (usize, usize), skips: &[u64], retained: &mut [u64]) {
    let dec = &cfg.decoder;
    let stages = dec.stages();
    let p = u(cfg.backbone.patch_size);
    let mut width = u(cfg.backbone.embed_dim);
    let mut cur = bytes(width * u(res.0) * u(res.1) / (p * p));
    for j in 0..stages {
        let level = stages - 1 - j;
        let pixels = pixels_at(res, level);
        let skip = skips.get(level).copied().unwrap_or(0);
        let out = u(dec.fusion_channels[j]);
        let mut t = Tally::default();
        t.upsample(pixels * width);
        conv_norm_relu(&mut t, pixels, width + skip, out, 3);
        let held: u64 = retained.iter().sum();
        let live = held + cur + bytes(pixels * (width + skip)) + bytes(pixels * out);
        b.push(format!("decoder.fusion.{j}"), t, live);
        if level < retained.len() {
            retained[level] = 0;
        }
        width = out;
        cur = bytes(pixels * out);
    }
    let pixels = pixels_at(res, 0);
    let mut t = Tally::default();
    t.conv(pixels, width, 1, 3, 1, true);
    t.act(pixels);
    b.push("decoder.head".into(), t, cur + 2 * bytes(pixels));
}

fn detail_capture_cost(b: &mut Builder, cfg: &ModelConfig, res: (usize, usize), tokens: u64) {
    let dec = &cfg.decoder;
    let mut prev = u(cfg.backbone.in_channels);
    let mut retained: Vec<u64> = Vec::new();
    let input = bytes(prev * pixels_at(res, 0));
    for level in 0..dec.used_levels() {
        let pixels = pixels_at(res, level);
        let cout = u(dec.detail_channels[level]);
        let mut t = Tally::default();
        conv_norm_relu(&mut t, pixels, prev, cout, 3);
        let held: u64 = retained.iter().sum();
        let src = if level == 0 { input } else { 0 };
        b.push(format!("decoder.convstream.{level}"), t, tokens + held + src + bytes(pixels * cout));
        retained.push(bytes(pixels * cout));
        prev = cout;
    }
    let skips: Vec<u64> = (0..dec.stages()).map(|l| u(dec.detail_width(l).unwrap_or(0))).collect();
    fusion_chain(b, cfg, res, &skips, &mut retained);
}

/// Backbone-map pyramid: for every stride `2^l` below the patch stride, a
/// stack of 2x2 stride-2 deconvolutions (halving channels, LN + GELU between
/// them), then 1x1 -> 256 + LN, 3x3 256 -> 256 + LN and a 1x1 projection to
/// the width the fusion head expects. The stride-`P` map is projected the
/// same way back to the backbone width. The full-resolution stem (D0) is kept.
fn pyramid_cost(b: &mut Builder, cfg: &ModelConfig, res: (usize, usize), tokens: u64) {
    let dec = &cfg.decoder;
    let c = u(cfg.backbone.embed_dim);
    let cin = u(cfg.backbone.in_channels);
    let sfp = u(SFP_WIDTH);
    let levels = dec.stages();
    let mut retained: Vec<u64> = vec![0; levels];

    let pixels0 = pixels_at(res, 0);
    let d0 = u(dec.detail_width(0).unwrap_or(0));
    if d0 > 0 {
        let mut t = Tally::default();
        conv_norm_relu(&mut t, pixels0, cin, d0, 3);
        b.push("decoder.stem".into(), t, tokens + bytes(pixels0 * (cin + d0)));
        retained[0] = bytes(pixels0 * d0);
    }

    let mut skips = vec![0u64; levels];
    skips[0] = d0;
    for level in (1..=levels).rev() {
        let pixels = pixels_at(res, level);
        let target = if level == levels { c } else { u(dec.detail_width(level).unwrap_or(dec.detail_channels[level])) };
        let mut t = Tally::default();
        let mut width = c;
        let mut widest = tokens;
        for step in 0..levels - level {
            let out_pixels = pixels_at(res, levels - step - 1);
            let out = (width / 2).max(1);
            t.conv(out_pixels, width, out, 2, 1, true);
            if step + 1 < levels - level {
                t.norm(out_pixels * out, out);
                t.act(out_pixels * out);
            }
            widest = widest.max(bytes(out_pixels * (width + out)));
            width = out;
        }
        t.conv(pixels, width, sfp, 1, 1, false);
        t.norm(pixels * sfp, sfp);
        t.conv(pixels, sfp, sfp, 3, 1, false);
        t.norm(pixels * sfp, sfp);
        t.conv(pixels, sfp, target, 1, 1, false);
        let held: u64 = retained.iter().sum();
        let live = tokens + held + widest.max(2 * bytes(pixels * sfp));
        b.push(format!("decoder.pyramid.{level}"), t, live);
        if level < levels {
            retained[level] = bytes(pixels * target);
            skips[level] = target;
        }
    }
    fusion_chain(b, cfg, res, &skips, &mut retained);
}

/// FLOPs ratio of `cfg` to the same config with every block global.
pub fn global_ratio(cfg: &ModelConfig, res: (usize, usize), mode: AttentionMode) -> Result<f64> {
    let mut all = cfg.clone();
    all.backbone.global_blocks = Some(all.backbone.depth());
    let num = model_flops(cfg, DecoderKind::DetailCapture, res, mode)?.flops;
    let den = model_flops(&all, DecoderKind::DetailCapture, res, mode)?.flops;
    Ok(num as f64 / den as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::model_specs;

    fn vit_s(globals: usize, neck: NeckKind) -> ModelConfig {
        let mut cfg = ModelConfig::vit_s();
        cfg.backbone.global_blocks = Some(globals);
        cfg.backbone.neck_kind = neck;
        cfg
    }

    #[test]
    fn single_window_equals_global() {
        for (k, c) in [(14, 384), (4, 32), (7, 96)] {
            let n = k * k;
            assert_eq!(attention_flops(n, c, 6, AttentionKind::Window(k)), attention_flops(n, c, 6, AttentionKind::Global));
        }
    }

    #[test]
    fn score_term_at_2048() {
        let (n, c) = (16384u64, 384u64);
        let score = attention_flops(16384, 384, 6, AttentionKind::Global) - 4 * n * c * c;
        assert_eq!(score, 2 * n * n * c);
        assert!((score as f64 / 2.06e11 - 1.0).abs() < 0.01);
    }

    #[test]
    fn scaling_in_n() {
        let (c, k) = (384, 14);
        let proj = |n: usize| 4 * (n as u64) * (c as u64) * (c as u64);
        let g1 = attention_flops(4096, c, 6, AttentionKind::Global) - proj(4096);
        let g2 = attention_flops(8192, c, 6, AttentionKind::Global) - proj(8192);
        assert_eq!(g2, 4 * g1);
        let w1 = attention_flops(4096, c, 6, AttentionKind::Window(k));
        let w2 = attention_flops(8192, c, 6, AttentionKind::Window(k));
        assert_eq!(w2, 2 * w1);
    }

    #[test]
    fn totals_are_entry_sums_and_params_match_specs() {
        for cfg in [ModelConfig::tiny(), ModelConfig::vit_s(), vit_s(0, NeckKind::Convnext), vit_s(12, NeckKind::Naive)] {
            let r = model_flops(&cfg, DecoderKind::DetailCapture, (64, 96), AttentionMode::Normal).unwrap();
            assert_eq!(r.flops, r.entries.iter().map(|e| e.flops).sum::<u64>());
            assert_eq!(r.macs, r.entries.iter().map(|e| e.macs).sum::<u64>());
            let specs: usize = model_specs(&cfg).iter().map(|s| s.numel()).sum();
            assert_eq!(r.params, specs as u64);
        }
        let mut cfg = ModelConfig::tiny();
        cfg.decoder.detail_levels = Some(1);
        let r = model_flops(&cfg, DecoderKind::DetailCapture, (32, 32), AttentionMode::GridSample).unwrap();
        assert_eq!(r.params, model_specs(&cfg).iter().map(|s| s.numel() as u64).sum::<u64>());
    }

    #[test]
    fn indivisible_resolution() {
        let r = model_flops(&ModelConfig::vit_s(), DecoderKind::DetailCapture, (2040, 2048), AttentionMode::Normal);
        assert!(matches!(r, Err(MatteError::IndivisibleResolution { divisor: 16, .. })));
    }

    #[test]
    fn monotone_in_global_count() {
        let res = (2048, 2048);
        let flops: Vec<u64> = (0..=12)
            .map(|g| model_flops(&vit_s(g, NeckKind::None), DecoderKind::DetailCapture, res, AttentionMode::Normal).unwrap().flops)
            .collect();
        assert!(flops.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn grid_scores_are_a_quarter() {
        for grid in [(128, 128), (8, 12), (7, 9)] {
            let normal = attention_memory(grid, 384, 6, AttentionMode::Normal);
            let gridded = attention_memory(grid, 384, 6, AttentionMode::GridSample);
            let padded = (grid.0 + grid.0 % 2) * (grid.1 + grid.1 % 2);
            assert_eq!(gridded.tokens, padded);
            assert_eq!(4 * gridded.score_bytes, 6 * (padded * padded) as u64 * 4);
            if padded == grid.0 * grid.1 {
                assert_eq!(4 * gridded.score_bytes, normal.score_bytes);
            }
        }
    }

    #[test]
    fn grid_lowers_peak_memory() {
        let cfg = ModelConfig::vit_s();
        let normal = model_flops(&cfg, DecoderKind::DetailCapture, (2048, 2048), AttentionMode::Normal).unwrap();
        let grid = model_flops(&cfg, DecoderKind::DetailCapture, (2048, 2048), AttentionMode::GridSample).unwrap();
        assert!(grid.peak_activation_bytes < normal.peak_activation_bytes);
        assert!(grid.flops < normal.flops);
    }
}

