//! Experiment configuration files (JSON or TOML) layered over presets, with
//! `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{Aggregation, Axis, Granularity};
use crate::error::{Error, Result};
use crate::network::{Dataset as NetKind, NetworkConfig};
use crate::train::{DatasetSource, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub aggregation: Aggregation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axis: Axis,
    pub values: Vec<usize>,
    /// Train each configuration, not just count its cost.
    #[serde(default)]
    pub train: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Preset the file was layered over.
    pub preset: String,
    /// Seeds network initialisation.
    #[serde(default)]
    pub seed: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Fold batch norm into convolutions when compiling.
    #[serde(default)]
    pub fold_bn: bool,
    pub analysis: AnalysisConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let network = NetworkConfig::preset(name)?;
        let train = match network.dataset {
            NetKind::Synthetic => TrainConfig::synthetic(),
            NetKind::Cifar => TrainConfig::cifar(
                (1..=5)
                    .map(|i| PathBuf::from(format!("data/cifar-10-batches-bin/data_batch_{i}.bin")))
                    .collect(),
            ),
            NetKind::Imagenet => TrainConfig {
                epochs: 300,
                batch_size: 1024,
                lr0: 0.4,
                dataset: DatasetSource::FolderOfRawTensors {
                    path: "data/imagenet-tensors".into(),
                    augment: Default::default(),
                },
                ..TrainConfig::synthetic()
            },
        };
        let sweep = match network.dataset {
            NetKind::Synthetic => SweepConfig {
                axis: Axis::S,
                values: vec![1, 2, 4, 8],
                train: true,
            },
            _ => SweepConfig {
                axis: Axis::G,
                values: vec![1, 2, 4, 8],
                train: false,
            },
        };
        Ok(Self {
            preset: name.to_string(),
            seed: 0,
            network,
            train,
            fold_bn: false,
            analysis: AnalysisConfig {
                granularity: Granularity::PerGroup,
                aggregation: Aggregation::Mean,
            },
            sweep,
        })
    }

    /// Preset defaults, then the file (if any), then the overrides, in that order.
    /// The preset is `preset`, else the file's `preset` key, else `toy`.
    pub fn load(file: Option<&Path>, preset: Option<&str>, overrides: &[String]) -> Result<Self> {
        let user = match file {
            Some(p) => parse_file(p)?,
            None => Value::Object(Default::default()),
        };
        let name = preset
            .map(str::to_string)
            .or_else(|| user.get("preset").and_then(Value::as_str).map(str::to_string))
            .unwrap_or_else(|| "toy".into());
        let mut merged = serde_json::to_value(Self::preset(&name)?).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        merged["preset"] = Value::String(name);
        for o in overrides {
            apply_override(&mut merged, o)?;
        }
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.network.validate().map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// JSON when the text starts with `{`, TOML otherwise.
pub fn parse_text(text: &str) -> Result<Value> {
    let v = if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("JSON: {e}")))?
    } else {
        let t: toml::Value = toml::from_str(text).map_err(|e| Error::Config(format!("TOML: {e}")))?;
        serde_json::to_value(t).map_err(|e| Error::Config(e.to_string()))?
    };
    if !v.is_object() {
        return Err(Error::Config("config must be a table/object".into()));
    }
    Ok(v)
}

pub fn parse_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("`{}`: {e}", path.display())))?;
    parse_text(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("`{}`: {msg}", path.display())),
        other => other,
    })
}

/// Recursive object merge; non-object values in `top` replace those in `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// `a.b.c=value`; the value is read as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for key in path.split('.') {
        if key.is_empty() {
            return Err(Error::Config(format!("override `{spec}` has an empty key")));
        }
        if !slot.is_object() {
            return Err(Error::Config(format!("override `{spec}`: `{key}` is not inside a table")));
        }
        slot = slot
            .as_object_mut()
            .expect("checked above")
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    *slot = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_preset() {
        let c = ExperimentConfig::load(None, None, &[]).unwrap();
        assert_eq!(c.network, NetworkConfig::toy());
        assert_eq!(c.train.epochs, 30);
        let cifar = ExperimentConfig::load(None, Some("cifar-110"), &[]).unwrap();
        assert_eq!((cifar.train.epochs, cifar.train.batch_size, cifar.train.lr0), (300, 64, 0.1));
    }

    #[test]
    fn toml_and_json_layer_with_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "preset = \"cifar-110\"\nseed = 3\n[train]\nepochs = 12\n[network]\nsparse_factor = 2\n").unwrap();
        let c = ExperimentConfig::load(Some(&t), None, &["train.lr0=0.05".into(), "network.sfr_groups=2".into()]).unwrap();
        assert_eq!(c.preset, "cifar-110");
        assert_eq!((c.seed, c.train.epochs, c.train.lr0), (3, 12, 0.05));
        assert_eq!((c.network.sparse_factor, c.network.sfr_groups), (2, Some(2)));
        assert_eq!(c.train.batch_size, 64);

        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"train": {"epochs": 7}}"#).unwrap();
        let c = ExperimentConfig::load(Some(&j), Some("toy"), &[]).unwrap();
        assert_eq!(c.train.epochs, 7);
    }

    #[test]
    fn errors_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{ not json").unwrap();
        assert!(matches!(ExperimentConfig::load(Some(&bad), None, &[]), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::load(None, None, &["train.epochs=\"x\"".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(ExperimentConfig::load(None, None, &["noequals".into()]), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::load(None, Some("nope"), &[]), Err(Error::Config(_))));
        assert!(ExperimentConfig::load(None, None, &["network.groups=3".into()]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = ExperimentConfig::preset("cnv2-b").unwrap();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
