//! Declarative run configuration (TOML) with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitSpec, SyntheticSceneConfig};
use crate::error::{Error, Result};
use crate::model::{LossConfig, NetworkConfig};
use crate::theory::BoundProbeConfig;
use crate::train::TrainConfig;

/// Dataset locations. Relative paths resolve against the working directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub accurate_ratio: f64,
    pub seed: u64,
    pub stratify_by_category: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            accurate_ratio: 0.10,
            seed: 0,
            stratify_by_category: true,
        }
    }
}

impl SplitSection {
    pub fn spec(&self) -> Result<SplitSpec> {
        let spec = SplitSpec {
            accurate_ratio: self.accurate_ratio,
            seed: self.seed,
            stratify_by_category: self.stratify_by_category,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataPaths,
    pub synthetic: SyntheticSceneConfig,
    pub split: SplitSection,
    pub model: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub probe: BoundProbeConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads `path` (or the defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.split.spec()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.probe.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML value when possible
/// and taken as a bare string otherwise.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path `{path}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}` descends into a non-table")))?;
        node = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{path}` descends into a non-table")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
