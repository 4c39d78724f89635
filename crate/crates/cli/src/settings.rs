//! TOML configuration. Every section is optional and overlays the preset
//! defaults key by key:
//!
//! ```toml
//! preset = "tiny"
//! [backbone]   # BackboneConfig fields
//! [decoder]    # DecoderConfig fields
//! [run]        # RunConfig fields
//! [augment]    # AugmentConfig fields
//! [adamw]      # beta1, beta2, eps, weight_decay
//! [train]      # schedule, steps_per_epoch
//! [service]    # addr, max_pixels, max_sessions, ttl_secs, allowed_origin
//! ```

use std::path::Path;

use plainmatte::config::ModelConfig;
use plainmatte::trainer::{LrSchedule, TrainOptions};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<String>,
    pub backbone: Option<toml::Table>,
    pub decoder: Option<toml::Table>,
    pub run: Option<toml::Table>,
    pub augment: Option<toml::Table>,
    pub adamw: Option<toml::Table>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub service: ServiceSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub schedule: Option<LrSchedule>,
    pub steps_per_epoch: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSection {
    pub addr: Option<String>,
    pub max_pixels: Option<usize>,
    pub max_sessions: Option<usize>,
    pub ttl_secs: Option<u64>,
    pub allowed_origin: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub service: ServiceSection,
}

impl FileConfig {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

/// Replaces fields of `base` with the keys of `over`, recursing into
/// nested tables. Keys absent from `base` are rejected.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, over: Option<&toml::Table>, section: &str) -> Result<T, CliError> {
    let Some(over) = over else {
        return Ok(serde_json::from_value(serde_json::to_value(base).expect("config serializes")).expect("round trip"));
    };
    let mut value = serde_json::to_value(base).expect("config serializes");
    let patch = serde_json::to_value(over).map_err(|e| CliError::Runtime(format!("[{section}]: {e}")))?;
    merge(&mut value, patch, section)?;
    serde_json::from_value(value).map_err(|e| CliError::Runtime(format!("[{section}]: {e}")))
}

fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = format!("{path}.{k}");
                match b.get_mut(&k) {
                    Some(slot @ Value::Object(_)) => merge(slot, v, &key)?,
                    Some(slot) => *slot = v,
                    None => return Err(CliError::Runtime(format!("unknown config key `{key}`"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

impl Settings {
    /// Preset precedence: explicit flag, then the file's `preset`, then
    /// `default_preset`.
    pub fn resolve(file: Option<&FileConfig>, preset_flag: Option<&str>, default_preset: &str) -> Result<Self, CliError> {
        let empty = FileConfig::default();
        let file = file.unwrap_or(&empty);
        let preset = preset_flag.or(file.preset.as_deref()).unwrap_or(default_preset).to_string();
        let base = ModelConfig::preset(&preset).map_err(|e| CliError::Usage(e.to_string()))?;
        let model = ModelConfig {
            backbone: overlay(&base.backbone, file.backbone.as_ref(), "backbone")?,
            decoder: overlay(&base.decoder, file.decoder.as_ref(), "decoder")?,
        };
        model.validate().map_err(|e| CliError::Runtime(e.to_string()))?;

        let defaults = if base == ModelConfig::tiny() { TrainOptions::tiny() } else { TrainOptions::default() };
        let mut train = TrainOptions {
            run: overlay(&defaults.run, file.run.as_ref(), "run")?,
            augment: overlay(&defaults.augment, file.augment.as_ref(), "augment")?,
            adamw: overlay(&defaults.adamw, file.adamw.as_ref(), "adamw")?,
            schedule: file.train.schedule.unwrap_or(defaults.schedule),
            steps_per_epoch: file.train.steps_per_epoch.or(defaults.steps_per_epoch),
        };
        if !file.augment.as_ref().is_some_and(|t| t.contains_key("crop")) {
            train.augment.crop = train.run.crop_size;
        }
        if !file.adamw.as_ref().is_some_and(|t| t.contains_key("weight_decay")) {
            train.adamw.weight_decay = train.run.weight_decay;
        }
        Ok(Self { preset, model, train, service: file.service.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_preset() {
        let s = Settings::resolve(None, None, "tiny").unwrap();
        assert_eq!(s.model, ModelConfig::tiny());
        assert_eq!(s.train, TrainOptions::tiny());
    }

    #[test]
    fn sections_overlay_keys() {
        let f = FileConfig::parse(
            "preset = \"tiny\"\n[backbone]\nglobal_blocks = 1\npos_grid = [4, 4]\n[run]\ncrop_size = 32\nweight_decay = 0.05\n[train]\nschedule = \"constant\"\n",
        )
        .unwrap();
        let s = Settings::resolve(Some(&f), None, "vits").unwrap();
        assert_eq!(s.preset, "tiny");
        assert_eq!(s.model.backbone.global_blocks, Some(1));
        assert_eq!(s.model.backbone.pos_grid, (4, 4));
        assert_eq!(s.model.backbone.embed_dim, 32);
        assert_eq!((s.train.run.crop_size, s.train.augment.crop), (32, 32));
        assert_eq!(s.train.adamw.weight_decay, 0.05);
        assert_eq!(s.train.schedule, LrSchedule::Constant);
    }

    #[test]
    fn flag_preset_wins() {
        let f = FileConfig::parse("preset = \"tiny\"").unwrap();
        assert_eq!(Settings::resolve(Some(&f), Some("vits"), "tiny").unwrap().model, ModelConfig::vit_s());
    }

    #[test]
    fn unknown_keys_rejected() {
        let f = FileConfig::parse("[backbone]\nembed_dims = 3\n").unwrap();
        assert!(matches!(Settings::resolve(Some(&f), None, "tiny"), Err(CliError::Runtime(m)) if m.contains("embed_dims")));
        assert!(FileConfig::parse("[bogus]\nx = 1\n").is_err());
        assert!(FileConfig::parse("[train]\nepochs = 1\n").is_err());
    }

    #[test]
    fn invalid_model_rejected() {
        let f = FileConfig::parse("[backbone]\nnum_heads = 3\n").unwrap();
        assert!(Settings::resolve(Some(&f), None, "tiny").is_err());
    }
}
