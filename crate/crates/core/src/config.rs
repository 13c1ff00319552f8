//! Run configuration, loadable from TOML.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kbc::KbcConfig;

/// Benchmark whose KBC gate threshold a run adopts by default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dataset {
    PfPascal,
    PfWillow,
    #[default]
    Spair,
}

impl Dataset {
    pub fn kbc_threshold(self) -> f64 {
        match self {
            Dataset::PfPascal => 0.7,
            Dataset::PfWillow => 0.9,
            Dataset::Spair => 0.8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::PfPascal => "pf-pascal",
            Dataset::PfWillow => "pf-willow",
            Dataset::Spair => "spair",
        }
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pf-pascal" => Ok(Dataset::PfPascal),
            "pf-willow" => Ok(Dataset::PfWillow),
            "spair" => Ok(Dataset::Spair),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Square network input side in pixels.
    pub input_size: usize,
    pub dataset: Dataset,
    /// KBC gate threshold; the dataset default when absent.
    pub threshold: Option<f64>,
    pub alphas: Vec<f64>,
    pub stride: usize,
    pub min_distance: f64,
    pub max_scale: f64,
    pub context_margin: f64,
    pub temperature: f64,
    pub seed: u64,
    pub base_channels: usize,
    pub block_gain: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            dataset: Dataset::default(),
            threshold: None,
            alphas: vec![0.05, 0.1, 0.15],
            stride: 16,
            min_distance: 16.0,
            max_scale: 8.0,
            context_margin: 0.9,
            temperature: 0.05,
            seed: 0,
            base_channels: 16,
            block_gain: 0.5,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn kbc_threshold(&self) -> f64 {
        self.threshold
            .unwrap_or_else(|| self.dataset.kbc_threshold())
    }

    pub fn kbc(&self) -> KbcConfig {
        KbcConfig {
            min_distance: self.min_distance,
            context_margin: self.context_margin,
            max_scale: self.max_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.stride != 16 {
            return Err(Error::Config(format!(
                "stride is fixed at 16, got {}",
                self.stride
            )));
        }
        let t = self.kbc_threshold();
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1], got {t}"
            )));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0)) {
            return bad("every alpha");
        }
        for (name, v) in [
            ("min_distance", self.min_distance),
            ("max_scale", self.max_scale),
            ("context_margin", self.context_margin),
            ("temperature", self.temperature),
            ("block_gain", self.block_gain),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name);
            }
        }
        if self.base_channels == 0 {
            return bad("base_channels");
        }
        Ok(())
    }
}
