//! Backbone plus detail-capture decoder as one parameterised model.

use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::backbone::{backbone_graph, backbone_specs, tokens_to_map, AttentionMode};
use crate::config::ModelConfig;
use crate::detail::{conv_stream_graph, decode_graph, decoder_specs, AlphaMatte};
use crate::error::{MatteError, Result};
use crate::params::{load_archive, save_archive, split_prefix, ParamSpec, ParamStore};
use crate::plane::{seeded_rng, MattingInput, Plane};
use crate::tensor::Real;

/// Archive metadata key holding the serialized [`ModelConfig`].
pub const CONFIG_KEY: &str = "model_config";
/// Name prefix of model tensors inside an archive.
pub const MODEL_PREFIX: &str = "model.";

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

pub fn model_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = backbone_specs(&cfg.backbone);
    specs.extend(decoder_specs(&cfg.decoder, cfg.backbone.embed_dim, cfg.backbone.in_channels));
    specs
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::initialize(&model_specs(&config), &mut seeded_rng(seed));
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.check_against(&model_specs(&config))?;
        Ok(Self { config, params })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        model_specs(&self.config)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    /// Builds the full forward pass on `(4, H, W)`; `H` and `W` must be
    /// multiples of the patch size. Returns alpha `(1, H, W)`.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var, mode: AttentionMode) -> Result<Var> {
        let (tokens, grid) = backbone_graph(g, &self.params, &self.config.backbone, x, mode)?;
        let features = tokens_to_map(g, tokens, grid);
        let details = conv_stream_graph(g, &self.params, &self.config.decoder, x)?;
        decode_graph(g, &self.params, &self.config.decoder, features, &details)
    }

    /// Alpha for an input whose dims are multiples of the patch size.
    pub fn predict(&self, input: &MattingInput<T>, mode: AttentionMode) -> Result<AlphaMatte<T>> {
        let p = self.config.backbone.patch_size;
        let (h, w) = input.dims();
        if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
            return Err(MatteError::IndivisibleResolution { height: h, width: w, divisor: p });
        }
        let mut g = Graph::inference();
        let x = g.constant(input.stacked().to_tensor());
        let a = self.forward_graph(&mut g, x, mode)?;
        Plane::from_tensor(g.take_value(a))
    }

    /// Writes the model (and any `extra` prefixed stores) to an archive dir.
    pub fn save(&self, dir: &Path, extra: &[(&str, &ParamStore<T>)], mut metadata: serde_json::Value) -> Result<()> {
        if !metadata.is_object() {
            metadata = serde_json::json!({});
        }
        metadata[CONFIG_KEY] = serde_json::to_value(&self.config)?;
        let mut stores = vec![(MODEL_PREFIX, &self.params)];
        stores.extend_from_slice(extra);
        save_archive(dir, &stores, metadata)
    }

    /// Loads a model archive; returns the whole store for callers that need
    /// the extra prefixes, plus metadata.
    pub fn load(dir: &Path) -> Result<(Self, ParamStore<T>, serde_json::Value)> {
        let (all, meta) = load_archive::<T>(dir)?;
        let cfg: ModelConfig = serde_json::from_value(
            meta.get(CONFIG_KEY).cloned().ok_or_else(|| MatteError::Checkpoint(format!("metadata lacks `{CONFIG_KEY}`")))?,
        )?;
        let model = Self::from_params(cfg, split_prefix(&all, MODEL_PREFIX))?;
        Ok((model, all, meta))
    }
}
