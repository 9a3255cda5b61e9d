//! Run configuration: a TOML file with one section per module, overridden by
//! command-line flags. The resolved config is echoed so a run can be
//! replayed from it.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use xlda_core::corpus::{LanguageClass, Schema};
use xlda_core::{ModelConfig, PackerConfig, ScheduleConfig, Stage};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub schema: Schema,
    pub sampler: SamplerSection,
    pub packer: PackerConfig,
    /// Absent means each command uses its own default schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    pub model: ModelConfig,
    pub filter: FilterSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub alpha_temp: f64,
    /// Empty means uniform over the corpus languages.
    pub beta: BTreeMap<String, f64>,
    pub rho: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { alpha_temp: 1.0, beta: BTreeMap::new(), rho: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<LanguageClass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keep_fraction: Option<f64>,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self { stage: Stage::Pretrain, class: None, keep_fraction: None }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serialising the effective config")
    }
}
