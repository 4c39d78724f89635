//! Architecture and run configuration records.

use serde::{Deserialize, Serialize};

use crate::error::{MatteError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NeckKind {
    None,
    Naive,
    #[default]
    Residual,
    Convnext,
}

impl std::str::FromStr for NeckKind {
    type Err = MatteError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "naive" => Ok(Self::Naive),
            "residual" => Ok(Self::Residual),
            "convnext" => Ok(Self::Convnext),
            other => Err(MatteError::Config(format!("unknown neck kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    Window(usize),
    Global,
}

/// Per-block window/global assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSchedule {
    kinds: Vec<AttentionKind>,
}

impl AttentionSchedule {
    /// `num_global` global blocks spread evenly over `total` blocks, the last
    /// one always at the final block; every other block uses `window`.
    pub fn hybrid(total: usize, num_global: usize, window: usize) -> Self {
        assert!(num_global <= total, "more global blocks than blocks");
        let mut kinds = vec![AttentionKind::Window(window); total];
        for j in 0..num_global {
            let pos = (((j + 1) * total) as f64 / num_global as f64).round() as usize - 1;
            kinds[pos] = AttentionKind::Global;
        }
        Self { kinds }
    }

    pub fn from_kinds(kinds: Vec<AttentionKind>) -> Self {
        Self { kinds }
    }

    pub fn kinds(&self) -> &[AttentionKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn num_global(&self) -> usize {
        self.kinds.iter().filter(|k| matches!(k, AttentionKind::Global)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub patch_size: usize,
    pub num_groups: usize,
    pub blocks_per_group: usize,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub num_heads: usize,
    pub neck_kind: NeckKind,
    /// Number of global-attention blocks; `None` means one per group.
    #[serde(default)]
    pub global_blocks: Option<usize>,
    /// Token grid of the learned positional embedding (pretraining resolution).
    pub pos_grid: (usize, usize),
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_in_channels() -> usize {
    4
}

impl BackboneConfig {
    /// ViT-S proportions with four global blocks and residual necks.
    pub fn vit_s() -> Self {
        Self {
            embed_dim: 384,
            patch_size: 16,
            num_groups: 4,
            blocks_per_group: 3,
            window_size: 14,
            mlp_ratio: 4,
            num_heads: 6,
            neck_kind: NeckKind::Residual,
            global_blocks: None,
            pos_grid: (14, 14),
            in_channels: 4,
        }
    }

    /// Desk-scale preset used for training and gradient checks.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 32,
            patch_size: 8,
            num_groups: 2,
            blocks_per_group: 2,
            window_size: 4,
            mlp_ratio: 4,
            num_heads: 2,
            neck_kind: NeckKind::Residual,
            global_blocks: None,
            pos_grid: (8, 8),
            in_channels: 4,
        }
    }

    pub fn depth(&self) -> usize {
        self.num_groups * self.blocks_per_group
    }

    pub fn num_global(&self) -> usize {
        self.global_blocks.unwrap_or(self.num_groups)
    }

    pub fn schedule(&self) -> AttentionSchedule {
        AttentionSchedule::hybrid(self.depth(), self.num_global(), self.window_size)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Index of the block after which group `g`'s neck runs.
    pub fn neck_after_block(&self, g: usize) -> usize {
        (g + 1) * self.blocks_per_group - 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MatteError::Config(m));
        if self.depth() == 0 {
            return fail("backbone needs at least one block".into());
        }
        if self.window_size == 0 {
            return fail("window size must be >= 1".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.patch_size < 2 || !self.patch_size.is_power_of_two() {
            return fail(format!("patch size {} must be a power of two >= 2", self.patch_size));
        }
        if self.num_global() > self.depth() {
            return fail(format!(
                "{} global blocks requested for {} blocks",
                self.num_global(),
                self.depth()
            ));
        }
        if self.pos_grid.0 == 0 || self.pos_grid.1 == 0 {
            return fail("positional grid must be non-empty".into());
        }
        Ok(())
    }
}

/// Detail-capture decoder widths. Level `i` works at stride `2^i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Channels of D0, D1, ... (one per stride below the patch size).
    pub detail_channels: Vec<usize>,
    /// Output channels of the fusion stages, coarsest first.
    pub fusion_channels: Vec<usize>,
    /// How many detail maps (from D0 upward) are fused; the rest of the
    /// chain upsamples without a detail skip. `None` uses them all.
    #[serde(default)]
    pub detail_levels: Option<usize>,
}

impl DecoderConfig {
    pub fn vit_s() -> Self {
        Self {
            detail_channels: vec![32, 48, 96, 192],
            fusion_channels: vec![256, 128, 64, 32],
            detail_levels: None,
        }
    }

    pub fn tiny() -> Self {
        Self { detail_channels: vec![8, 16, 32], fusion_channels: vec![32, 16, 16], detail_levels: None }
    }

    pub fn stages(&self) -> usize {
        self.fusion_channels.len()
    }

    pub fn used_levels(&self) -> usize {
        self.detail_levels.unwrap_or(self.detail_channels.len()).min(self.detail_channels.len())
    }

    /// Channels of the detail map fused at level `level`, if it is fused.
    pub fn detail_width(&self, level: usize) -> Option<usize> {
        (level < self.used_levels()).then(|| self.detail_channels[level])
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        let levels = patch_size.trailing_zeros() as usize;
        if self.detail_channels.len() != levels || self.fusion_channels.len() != levels {
            return Err(MatteError::Config(format!(
                "patch size {patch_size} needs {levels} detail and fusion widths, got {} and {}",
                self.detail_channels.len(),
                self.fusion_channels.len()
            )));
        }
        if self.detail_channels.iter().chain(&self.fusion_channels).any(|&c| c == 0) {
            return Err(MatteError::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn vit_s() -> Self {
        Self { backbone: BackboneConfig::vit_s(), decoder: DecoderConfig::vit_s() }
    }

    pub fn tiny() -> Self {
        Self { backbone: BackboneConfig::tiny(), decoder: DecoderConfig::tiny() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "vits" | "vit-s" | "vit_s" => Ok(Self::vit_s()),
            "tiny" => Ok(Self::tiny()),
            other => Err(MatteError::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate(self.backbone.patch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub crop_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub layer_decay: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            crop_size: 512,
            batch_size: 32,
            epochs: 100,
            base_lr: 5e-4,
            weight_decay: 0.1,
            layer_decay: 0.65,
        }
    }
}

impl RunConfig {
    pub fn tiny() -> Self {
        Self { crop_size: 64, batch_size: 4, ..Self::default() }
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.crop_size == 0 || self.crop_size % patch_size != 0 || self.crop_size % 16 != 0 {
            return Err(MatteError::Config(format!(
                "crop size {} must be divisible by the patch size {patch_size} and by 16",
                self.crop_size
            )));
        }
        if self.batch_size == 0 {
            return Err(MatteError::Config("batch size must be >= 1".into()));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(MatteError::Config(format!("layer decay {} not in (0,1]", self.layer_decay)));
        }
        Ok(())
    }
}
