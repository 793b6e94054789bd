//! Layered experiment configuration.
//!
//! A resolved config is the family defaults, overlaid by a TOML file, overlaid
//! by per-scenario overrides. Tables merge key by key, so a layer only needs
//! the values it changes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptConfig;
use crate::data::{SplitRatios, SyntheticShiftSpec};
use crate::error::{Error, Result};
use crate::models::presets::ArchPreset;
use crate::models::{ContextNetConfig, DiscriminatorConfig, EncoderConfig, ModelConfig};
use crate::optim::AdamConfig;
use crate::pretrain::PretrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Synthetic,
    Har,
    Ssc,
    Mfd,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Synthetic, Family::Har, Family::Ssc, Family::Mfd];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Synthetic => "synthetic",
            Family::Har => "har",
            Family::Ssc => "ssc",
            Family::Mfd => "mfd",
        }
    }

    pub fn preset(self) -> ArchPreset {
        match self {
            Family::Synthetic => ArchPreset::Synthetic,
            Family::Har => ArchPreset::Har,
            Family::Ssc => ArchPreset::Ssc,
            Family::Mfd => ArchPreset::Mfd,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset family `{s}` (synthetic, har, ssc, mfd)")))
    }
}

/// Domain names of the synthetic family.
pub const SYNTHETIC_DOMAINS: [&str; 2] = ["source", "target"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub family: Family,
    /// Real families read `<data_root>/<family>/<domain>/`.
    pub data_root: PathBuf,
    /// Domains of the family; empty means every subdirectory of the family
    /// directory (or `source`/`target` for the synthetic family).
    pub domains: Vec<String>,
    /// Per-domain, per-channel standardization fitted on each training split.
    pub normalize: bool,
    /// Applies to every family, including the synthetic generator.
    pub split: SplitRatios,
    /// Generator settings of the synthetic family; its seed is offset by the run seed.
    pub synthetic: SyntheticShiftSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            family: Family::Synthetic,
            data_root: PathBuf::from("data"),
            domains: Vec::new(),
            normalize: true,
            split: SplitRatios::default(),
            synthetic: SyntheticShiftSpec::default(),
        }
    }
}

/// Architecture: a preset (the family's by default) with optional part overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<ArchPreset>,
    pub encoder: Option<EncoderConfig>,
    pub context: Option<ContextNetConfig>,
    pub discriminator: Option<DiscriminatorConfig>,
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunnerSection {
    pub seeds: Vec<u64>,
    /// Parallel scenario workers; 0 uses every core.
    pub workers: usize,
    pub out: PathBuf,
}

impl Default for RunnerSection {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            workers: 1,
            out: PathBuf::from("results"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub runner: RunnerSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::defaults(Family::Synthetic)
    }
}

impl ExperimentConfig {
    /// Published training settings for the sensor families; a desk-scale
    /// budget for the synthetic benchmark.
    pub fn defaults(family: Family) -> Self {
        let (batch, lr) = match family {
            Family::Har => (128, 1e-4),
            Family::Ssc => (128, 1e-3),
            Family::Mfd => (512, 1e-4),
            Family::Synthetic => (128, 1e-3),
        };
        let weight_decay = 3e-4;
        let mut pretrain = PretrainConfig {
            batch_size: batch,
            optimizer: AdamConfig::new(lr, weight_decay),
            ..PretrainConfig::default()
        };
        let mut adapt = AdaptConfig {
            batch_size: batch,
            encoder_optimizer: AdamConfig::new(lr, weight_decay),
            discriminator_optimizer: AdamConfig::new(lr, weight_decay),
            ..AdaptConfig::default()
        };
        if family == Family::Synthetic {
            pretrain.epochs = 60;
            adapt.iterations = 200;
            adapt.batch_size = 64;
            adapt.encoder_optimizer.lr = 1e-4;
        }
        Self {
            dataset: DatasetSection {
                family,
                ..DatasetSection::default()
            },
            model: ModelSection::default(),
            pretrain,
            adapt,
            runner: RunnerSection::default(),
        }
    }

    /// Resolves `layers` (lowest priority first) over the defaults of the
    /// family named by the last layer that sets `dataset.family`.
    pub fn resolve(layers: &[&toml::Table]) -> Result<Self> {
        let family = layers
            .iter()
            .rev()
            .find_map(|t| t.get("dataset")?.get("family")?.as_str().map(str::to_owned))
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or(Family::Synthetic);
        let mut merged = Self::defaults(family).to_table()?;
        for layer in layers {
            merge(&mut merged, layer);
        }
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::resolve(&[&parse_table(text)?])
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::resolve(&[&read_table(path)?])
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.adapt.validate()?;
        self.dataset.split.sizes(10)?;
        if self.runner.seeds.is_empty() {
            return Err(Error::Config("runner.seeds is empty".into()));
        }
        Ok(())
    }

    /// Model for data of the given shape: the preset with section overrides,
    /// fitted to the observed channels, classes and window length.
    pub fn model_config(&self, channels: usize, classes: usize, length: usize) -> Result<ModelConfig> {
        let preset = self.model.preset.unwrap_or(self.dataset.family.preset());
        let mut cfg = preset.model(channels, classes);
        cfg.input_length = length;
        if let Some(e) = &self.model.encoder {
            cfg.encoder = e.clone();
        }
        cfg.encoder.input_channels = channels;
        let features = cfg.encoder.output_channels();
        if let Some(c) = &self.model.context {
            cfg.context = c.clone();
        }
        cfg.context.input_dim = features;
        if let Some(d) = &self.model.discriminator {
            cfg.discriminator = d.clone();
        }
        cfg.discriminator.input_channels = features;
        if self.model.horizon.is_some() {
            cfg.horizon = self.model.horizon;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Short stable digest of the resolved configuration.
    pub fn hash(&self) -> String {
        digest(self)
    }
}

/// First 16 hex digits of the SHA-256 of `value`'s JSON form.
pub fn digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configs serialize to JSON");
    Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))
}

pub fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text).map_err(|e| Error::Format {
        what: "experiment config",
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Overlays `layer` onto `base`, descending into tables present in both.
pub fn merge(base: &mut toml::Table, layer: &toml::Table) {
    for (key, value) in layer {
        match (base.get_mut(key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) => merge(b, l),
            _ => {
                base.insert(key.clone(), value.clone());
            }
        }
    }
}

/// Builds a nested table from `path.to.key = value` assignments, the value
/// parsed as TOML and falling back to a bare string.
pub fn overrides_table<'a>(assignments: impl IntoIterator<Item = (&'a str, &'a toml::Value)>) -> Result<toml::Table> {
    let mut root = toml::Table::new();
    for (path, value) in assignments {
        let keys: Vec<&str> = path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(Error::Config(format!("malformed override key `{path}`")));
        }
        let mut table = &mut root;
        for key in &keys[..keys.len() - 1] {
            let entry = table
                .entry(key.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{path}` conflicts with a scalar at `{key}`")))?;
        }
        table.insert(keys[keys.len() - 1].to_string(), value.clone());
    }
    Ok(root)
}

/// Parses `path=value`, reading the value as TOML or else as a string.
pub fn parse_assignment(text: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form key=value")))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}
