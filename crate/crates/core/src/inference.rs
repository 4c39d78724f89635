//! Inference with a selectable attention strategy, plus the explicit 2x2
//! parity partition used by grid sampling.

use crate::backbone::{attention, AttentionMode, TokenGrid};
use crate::config::AttentionKind;
use crate::detail::AlphaMatte;
use crate::error::Result;
use crate::model::Model;
use crate::params::ParamStore;
use crate::plane::{validate_matting_input, MattingInput};
use crate::tensor::Real;

/// Normal global attention or grid-sampled global attention.
pub type Strategy = AttentionMode;

#[derive(Debug, Clone)]
pub struct InferenceRequest<T = f32> {
    pub input: MattingInput<T>,
    pub strategy: Strategy,
}

/// Splits tokens into the parity groups A = (even, even), B = (even, odd),
/// C = (odd, even), D = (odd, odd). Odd grids are first padded by
/// replicating the last row/column.
pub fn grid_partition<T: Real>(tokens: &TokenGrid<T>) -> [TokenGrid<T>; 4] {
    let (gh, gw, d) = (tokens.grid_h, tokens.grid_w, tokens.dim);
    let (hh, hw) = (gh.div_ceil(2), gw.div_ceil(2));
    std::array::from_fn(|parity| {
        let (py, px) = (parity / 2, parity % 2);
        let mut values = Vec::with_capacity(hh * hw * d);
        for y in 0..hh {
            for x in 0..hw {
                let sy = (2 * y + py).min(gh - 1);
                let sx = (2 * x + px).min(gw - 1);
                values.extend_from_slice(tokens.token(sy, sx));
            }
        }
        TokenGrid { grid_h: hh, grid_w: hw, dim: d, values }
    })
}

/// Inverse of [`grid_partition`]; `dims` is the original (unpadded) grid.
pub fn grid_unpartition<T: Real>(groups: &[TokenGrid<T>; 4], dims: (usize, usize)) -> TokenGrid<T> {
    let (gh, gw) = dims;
    let d = groups[0].dim;
    let mut values = Vec::with_capacity(gh * gw * d);
    for y in 0..gh {
        for x in 0..gw {
            let g = &groups[(y % 2) * 2 + x % 2];
            values.extend_from_slice(g.token(y / 2, x / 2));
        }
    }
    TokenGrid { grid_h: gh, grid_w: gw, dim: d, values }
}

/// Attention of block `block` computed independently inside each parity
/// group, then scattered back.
pub fn grid_global_attention<T: Real>(
    tokens: &TokenGrid<T>,
    store: &ParamStore<T>,
    block: usize,
    heads: usize,
) -> Result<TokenGrid<T>> {
    let groups = grid_partition(tokens);
    let mut out = groups.clone();
    for (o, g) in out.iter_mut().zip(&groups) {
        *o = attention(g, AttentionKind::Global, store, block, heads)?;
    }
    Ok(grid_unpartition(&out, (tokens.grid_h, tokens.grid_w)))
}

/// Side multiple the input is padded to: the patch size, doubled for grid
/// sampling so the token grid splits evenly.
pub fn pad_multiple(patch_size: usize, strategy: Strategy) -> usize {
    match strategy {
        AttentionMode::Normal => patch_size,
        AttentionMode::GridSample => 2 * patch_size,
    }
}

/// Replicate-pads to the strategy's multiple, predicts and crops back.
pub fn infer<T: Real>(model: &Model<T>, request: &InferenceRequest<T>) -> Result<AlphaMatte<T>> {
    validate_matting_input(&request.input)?;
    let m = pad_multiple(model.config.backbone.patch_size, request.strategy);
    let (h, w) = request.input.dims();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return model.predict(&request.input, request.strategy);
    }
    let padded = request.input.pad_replicate(ph, pw);
    model.predict(&padded, request.strategy)?.crop(0, 0, h, w)
}
