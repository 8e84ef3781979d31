//! Pipeline configuration, loaded from TOML, with a canonical hashable form.

use crate::attribution::Displacement;
use crate::dataset::{LabelStandard, SplitMode, EPOCH_SECONDS};
use crate::record::Rate;
use crate::render::RenderConfig;
use crate::resample::ResamplerConfig;
use crate::tune::TrainingDefaults;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSelection {
    /// Output channel order; also the lane order in rendered images.
    pub wanted: Vec<String>,
    /// File label → canonical label.
    pub aliases: BTreeMap<String, String>,
}

impl Default for ChannelSelection {
    fn default() -> Self {
        ChannelSelection {
            wanted: ["F3", "F4", "C3", "C4", "O1", "O2"].map(String::from).to_vec(),
            aliases: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleSettings {
    pub filter_half_width: usize,
    pub kaiser_beta: f64,
    pub cutoff_fraction: f64,
}

impl Default for ResampleSettings {
    fn default() -> Self {
        let d = ResamplerConfig::new(Rate::hz(1));
        ResampleSettings { filter_half_width: d.filter_half_width, kaiser_beta: d.kaiser_beta, cutoff_fraction: d.cutoff_fraction }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSettings {
    /// Failed channels per augmented subject.
    pub k_channels: usize,
    /// Fixed noise standard deviation; unset means per-channel pre-onset std.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
}

impl Default for CorruptionSettings {
    fn default() -> Self {
        CorruptionSettings { k_channels: 1, noise_sigma: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSettings {
    pub baseline: u8,
    pub displacement: Displacement,
    pub top_fraction: f64,
    pub smooth: bool,
}

impl Default for AttributionSettings {
    fn default() -> Self {
        AttributionSettings { baseline: 255, displacement: Displacement::Probabilities, top_fraction: 0.30, smooth: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: String,
    /// Target sampling rate, e.g. `"200"` or `"125/2"`.
    pub f_target: String,
    pub t_epoch_s: u32,
    pub label_standard: LabelStandard,
    pub split_mode: SplitMode,
    pub seeds: Vec<u64>,
    pub prompt: String,
    pub channels: ChannelSelection,
    pub resample: ResampleSettings,
    pub render: RenderConfig,
    pub corruption: CorruptionSettings,
    pub attribution: AttributionSettings,
    pub training: TrainingDefaults,
    /// Where outputs go. Not part of the provenance hash.
    pub output_root: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: "custom".into(),
            f_target: "200".into(),
            t_epoch_s: EPOCH_SECONDS,
            label_standard: LabelStandard::Aasm,
            split_mode: SplitMode::Sample,
            seeds: vec![0, 1, 2, 3, 4],
            prompt: crate::gate::DEFAULT_PROMPT.into(),
            channels: ChannelSelection::default(),
            resample: ResampleSettings::default(),
            render: RenderConfig::default(),
            corruption: CorruptionSettings::default(),
            attribution: AttributionSettings::default(),
            training: TrainingDefaults::default(),
            output_root: PathBuf::from("psgforge-out"),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), detail: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    pub fn target_rate(&self) -> Result<Rate, ConfigError> {
        Rate::parse(&self.f_target)
            .filter(|r| r.is_positive())
            .ok_or_else(|| ConfigError::Invalid(format!("f_target `{}` is not a positive rate", self.f_target)))
    }

    pub fn resampler(&self) -> Result<ResamplerConfig, ConfigError> {
        let cfg = ResamplerConfig {
            target: self.target_rate()?,
            filter_half_width: self.resample.filter_half_width,
            kaiser_beta: self.resample.kaiser_beta,
            cutoff_fraction: self.resample.cutoff_fraction,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.resampler()?;
        self.render.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.t_epoch_s == 0 {
            return Err(ConfigError::Invalid("t_epoch_s must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("at least one seed is required".into()));
        }
        if self.channels.wanted.is_empty() {
            return Err(ConfigError::Invalid("channel selection is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.channels.wanted.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(ConfigError::Invalid(format!("channel `{dup}` selected twice")));
        }
        if self.render.lane_height(self.channels.wanted.len()).is_err() {
            return Err(ConfigError::Invalid(format!("{} channels do not fit the render canvas", self.channels.wanted.len())));
        }
        if !(1..=crate::corrupt::CORE_CHANNELS.len()).contains(&self.corruption.k_channels) {
            return Err(ConfigError::Invalid("corruption.k_channels must be in 1..=6".into()));
        }
        if let Some(s) = self.corruption.noise_sigma {
            if !(s.is_finite() && s >= 0.0) {
                return Err(ConfigError::Invalid(format!("corruption.noise_sigma {s} is invalid")));
            }
        }
        let f = self.attribution.top_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(ConfigError::Invalid(format!("attribution.top_fraction {f} must lie in (0, 1]")));
        }
        Ok(())
    }

    /// Compact JSON of every setting that influences output content.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("configuration serializes");
        if let serde_json::Value::Object(map) = &mut value {
            map.remove("output_root");
        }
        // serde_json objects are key-sorted, so this is stable
        serde_json::to_string(&value).expect("json value serializes")
    }

    /// Hex SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn provenance_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
