//! TOML configuration documents.
//!
//! ```toml
//! [model]
//! scale = "S"            # N, S, M, L or micro
//! # any NeckConfig field may be overridden, e.g.
//! # channels = [64, 128, 256, 512]
//! # enable_laf = false
//! # laf_merge = "add"
//!
//! [bench]
//! iterations = 30
//! warmup = 5
//! threads = 1
//! image_size = 256       # B2 is image_size / 4
//! ablations = ["Low", "High", "LAF", "Low+High", "Low+High+LAF"]
//!
//! [train]
//! steps = 200
//! lr = 0.01
//! momentum = 0.9
//! seed = 0
//! image_size = 32
//! batch_size = 8
//!
//! [io]
//! weights = "model.gdw"
//! ```
//!
//! Unknown keys are rejected. Omitted keys take the defaults shown above;
//! omitted model fields come from the scale preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inject_laf::LafMerge;
use crate::neck::{NeckConfig, Scale, Toggles, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeName {
    Concat,
    Add,
}

impl From<MergeName> for LafMerge {
    fn from(m: MergeName) -> Self {
        match m {
            MergeName::Concat => LafMerge::Concat,
            MergeName::Add => LafMerge::Add,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_scale")]
    pub scale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_mid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_splits: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high_splits: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repblock_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transformer_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_low_gd: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_high_gd: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_laf: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laf_merge: Option<MergeName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laf_reducer_relu: Option<bool>,
}

fn default_scale() -> String {
    "S".to_string()
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            scale: default_scale(),
            channels: None,
            low_mid: None,
            low_splits: None,
            high_splits: None,
            repblock_depth: None,
            transformer_depth: None,
            key_dim: None,
            heads: None,
            embed_width: None,
            enable_low_gd: None,
            enable_high_gd: None,
            enable_laf: None,
            laf_merge: None,
            laf_reducer_relu: None,
        }
    }
}

impl ModelSection {
    pub fn neck_config(&self) -> Result<NeckConfig> {
        let mut cfg = if self.scale.eq_ignore_ascii_case("micro") {
            NeckConfig::micro()
        } else {
            NeckConfig::preset(
                self.scale
                    .parse::<Scale>()
                    .map_err(|e| Error::Document(format!("model.scale: {e}")))?,
            )
        };
        if let Some(ch) = self.channels {
            let depth = cfg.transformer_depth;
            let scale = cfg.scale;
            cfg = NeckConfig {
                scale,
                transformer_depth: depth,
                ..NeckConfig::from_channels(ch)
            };
        }
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v.into();
                }
            };
        }
        set!(low_mid);
        set!(repblock_depth);
        set!(transformer_depth);
        set!(key_dim);
        set!(heads);
        set!(embed_width);
        set!(enable_low_gd);
        set!(enable_high_gd);
        set!(enable_laf);
        set!(laf_merge);
        set!(laf_reducer_relu);
        if let Some([a, b]) = self.low_splits {
            cfg.low_splits = (a, b);
        }
        if let Some([a, b]) = self.high_splits {
            cfg.high_splits = (a, b);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn table_labels() -> Vec<String> {
    Toggles::TABLE.iter().map(|t| t.label()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub iterations: usize,
    pub warmup: usize,
    pub threads: usize,
    pub image_size: usize,
    pub ablations: Vec<String>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            iterations: 30,
            warmup: 5,
            threads: 1,
            image_size: 256,
            ablations: table_labels(),
        }
    }
}

impl BenchSection {
    pub fn toggles(&self) -> Result<Vec<Toggles>> {
        if self.ablations.is_empty() {
            return Err(Error::Document(
                "bench.ablations is empty; list at least one variant".into(),
            ));
        }
        self.ablations
            .iter()
            .map(|s| {
                s.parse::<Toggles>()
                    .map_err(|e| Error::Document(format!("bench.ablations: {e}")))
            })
            .collect()
    }

    /// Side length of B2.
    pub fn b2_size(&self) -> Result<usize> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Document(format!(
                "bench.image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        Ok(self.image_size / 4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
    pub image_size: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            lr: d.lr,
            momentum: d.momentum,
            seed: d.seed,
            image_size: d.image_size,
            batch_size: d.batch_size,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            momentum: self.momentum,
            seed: self.seed,
            image_size: self.image_size,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub io: IoSection,
}

impl ConfigDocument {
    /// Parses TOML; errors carry the offending key and line.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Document(describe(text, &e)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Document(msg) => Error::Document(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn describe(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim().to_string();
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            let key = text.get(span.clone()).map(str::trim).unwrap_or("");
            format!("line {line}, key `{key}`: {msg}")
        }
        None => msg,
    }
}
