//! The JSON run configuration shared by every CLI subcommand.
//!
//! A config file is optional; missing fields take their defaults and unknown
//! keys are rejected. Any leaf can be overridden with `section.key=value`
//! (nested keys are dotted further, e.g. `train.weights.alpha1=0.4`). Values
//! are parsed as JSON and fall back to plain strings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::DatasetParams;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::masking::SubsetConfig;
use crate::model::Architecture;
use crate::training::TrainConfig;

/// Backbone layout; input size and class count come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            widths: a.widths,
            kernel_sizes: a.kernel_sizes,
            strides: a.strides,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetParams,
    pub masks: SubsetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Shorthands expanding to several keys.
const ALIASES: &[(&str, &[&str])] = &[("dataset.n", &["dataset.n_train", "dataset.n_test"])];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `key=value` overrides; every key must already exist.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("override `{raw}` is not key=value")))?;
            let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
            let keys = ALIASES
                .iter()
                .find(|(alias, _)| *alias == key)
                .map(|(_, targets)| targets.to_vec())
                .unwrap_or_else(|| vec![key]);
            for k in keys {
                set_path(&mut doc, k, value.clone())?;
            }
        }
        serde_json::from_value(doc).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.architecture().validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Backbone for this dataset's image size and class count.
    pub fn architecture(&self) -> Architecture {
        Architecture {
            in_channels: 3,
            height: self.dataset.height,
            width: self.dataset.width,
            widths: self.model.widths.clone(),
            kernel_sizes: self.model.kernel_sizes.clone(),
            strides: self.model.strides.clone(),
            num_classes: self.dataset.num_classes,
        }
    }

    /// Canonical pretty JSON of the fully resolved config.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let unknown = || Error::InvalidConfig(format!("unknown config key `{key}`"));
    let mut node = doc;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        let slot = obj.get_mut(part).ok_or_else(unknown)?;
        if parts.peek().is_none() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(unknown())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"lr": 0.1, "lrr": 2}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": {}}"#).is_err());
        assert!(RunConfig::default().with_overrides(&["train.lrr=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["nosection.x=1"]).is_err());
    }

    #[test]
    fn overrides_reach_nested_leaves() {
        let c = RunConfig::default()
            .with_overrides(&[
                "train.weights.alpha1=0.4",
                "train.masking=low",
                "dataset.n=7",
                "model.widths=[4,8]",
            ])
            .unwrap();
        assert_eq!(c.train.weights.alpha1, 0.4);
        assert_eq!(c.train.masking, crate::training::Masking::Low);
        assert_eq!((c.dataset.n_train, c.dataset.n_test), (7, 7));
        assert_eq!(c.model.widths, vec![4, 8]);
    }

    #[test]
    fn zero_images_is_a_validation_error() {
        let c = RunConfig::default().with_overrides(&["dataset.n=0"]).unwrap();
        assert!(c.validate().unwrap_err().is_validation());
    }

    #[test]
    fn resolved_json_round_trips() {
        let c = RunConfig::default().with_overrides(&["train.seed=9"]).unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
