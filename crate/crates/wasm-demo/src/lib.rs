//! Browser bindings for three interactive operations: the analytical cost
//! model, trimap generation from an alpha matte, and the token-to-group map
//! of an attention block. Each `*_impl` function is plain Rust so it can be
//! tested natively; the exported wrappers only convert errors.

use plainmatte::backbone::{AttentionMode, TokenLayout};
use plainmatte::config::{AttentionKind, ModelConfig, NeckKind};
use plainmatte::cost::{model_flops, DecoderKind};
use plainmatte::data::trimap_with_kernels;
use plainmatte::plane::Plane;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn mode_of(grid: bool) -> AttentionMode {
    if grid {
        AttentionMode::GridSample
    } else {
        AttentionMode::Normal
    }
}

/// Cost summary as JSON: totals, ratio against the all-global model and a
/// per-stage breakdown.
pub fn cost_json_impl(preset: &str, height: usize, width: usize, globals: usize, neck: &str, grid: bool, decoder: &str) -> Result<String, String> {
    let mut cfg = ModelConfig::preset(preset).map_err(|e| e.to_string())?;
    cfg.backbone.global_blocks = Some(globals);
    cfg.backbone.neck_kind = neck.parse::<NeckKind>().map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    let decoder: DecoderKind = decoder.parse().map_err(|e: plainmatte::error::MatteError| e.to_string())?;
    let mode = mode_of(grid);
    let report = model_flops(&cfg, decoder, (height, width), mode).map_err(|e| e.to_string())?;
    let mut all = cfg.clone();
    all.backbone.global_blocks = Some(all.backbone.depth());
    let reference = model_flops(&all, decoder, (height, width), mode).map_err(|e| e.to_string())?;
    let stages: Vec<_> = report.entries.iter().map(|e| json!({ "name": e.name, "flops": e.flops, "params": e.params })).collect();
    Ok(json!({
        "flops": report.flops,
        "macs": report.macs,
        "params": report.params,
        "depth": cfg.backbone.depth(),
        "ratio_vs_all_global": report.flops as f64 / reference.flops as f64,
        "backbone_flops": report.flops_of("blocks.") + report.flops_of("patch_embed") + report.flops_of("necks."),
        "decoder_flops": report.flops_of("decoder."),
        "peak_memory_bytes": report.peak_memory_bytes(),
        "peak_attention_activation_bytes": report.peak_attention_activation_bytes,
        "stages": stages,
    })
    .to_string())
}

/// 8-bit trimap (0, 128, 255) from an 8-bit alpha buffer in row-major order.
pub fn trimap_impl(alpha: &[u8], width: usize, height: usize, k_erode: usize, k_dilate: usize) -> Result<Vec<u8>, String> {
    if alpha.len() != width * height {
        return Err(format!("expected {} alpha bytes for {width}x{height}, got {}", width * height, alpha.len()));
    }
    let plane = Plane::new(1, height, width, alpha.iter().map(|&v| v as f32 / 255.0).collect()).map_err(|e| e.to_string())?;
    let tri = trimap_with_kernels(&plane, k_erode.max(1), k_dilate.max(1));
    Ok(tri.data().iter().map(|&v| if v == 0.0 { 0 } else if v == 1.0 { 255 } else { 128 }).collect())
}

/// Attention group of every token of a `grid_h x grid_w` token grid.
/// `kind` is `global`, `window` (with window side `window`) or `grid`.
pub fn attention_groups_impl(grid_h: usize, grid_w: usize, kind: &str, window: usize) -> Result<Vec<u32>, String> {
    if grid_h == 0 || grid_w == 0 {
        return Err("token grid must be non-empty".into());
    }
    let layout = match kind {
        "global" => TokenLayout::for_block(grid_h, grid_w, AttentionKind::Global, AttentionMode::Normal),
        "grid" => TokenLayout::for_block(grid_h, grid_w, AttentionKind::Global, AttentionMode::GridSample),
        "window" if window > 0 => TokenLayout::for_block(grid_h, grid_w, AttentionKind::Window(window), AttentionMode::Normal),
        "window" => return Err("window size must be >= 1".into()),
        other => return Err(format!("unknown attention kind `{other}`")),
    };
    let padded = layout.padded.0 * layout.padded.1;
    let mut group_of = vec![u32::MAX; padded];
    for (g, members) in layout.groups.iter().enumerate() {
        for &i in members {
            group_of[i] = g as u32;
        }
    }
    layout
        .crop_index
        .iter()
        .map(|pos| pos.map(|p| group_of[p]).ok_or_else(|| "token lost in layout".to_string()))
        .collect()
}

#[wasm_bindgen]
pub fn cost_json(preset: &str, height: usize, width: usize, globals: usize, neck: &str, grid: bool, decoder: &str) -> Result<String, JsValue> {
    cost_json_impl(preset, height, width, globals, neck, grid, decoder).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn trimap_from_alpha(alpha: &[u8], width: usize, height: usize, k_erode: usize, k_dilate: usize) -> Result<Vec<u8>, JsValue> {
    trimap_impl(alpha, width, height, k_erode, k_dilate).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn attention_groups(grid_h: usize, grid_w: usize, kind: &str, window: usize) -> Result<Vec<u32>, JsValue> {
    attention_groups_impl(grid_h, grid_w, kind, window).map_err(|e| JsValue::from_str(&e))
}
