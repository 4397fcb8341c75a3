//! Run configuration: JSON file deep-merged onto defaults, then `key=value`
//! overrides on dotted paths.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sft_core::model::ModelConfig;
use sft_core::train::TrainConfig;
use sft_core::{Result, SftError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Defaults for a vocabulary of `vocab_size`, then `file`, then
    /// `overrides`. Dependent extents are re-derived afterwards.
    ///
    /// A file may hold `{"model": .., "train": ..}` or a bare model config
    /// such as a checkpoint's `config.json`.
    pub fn resolve(vocab_size: usize, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let defaults = RunConfig {
            model: ModelConfig::with_vocab(vocab_size),
            train: TrainConfig::default(),
        };
        let mut value = serde_json::to_value(&defaults).map_err(|e| SftError::json("default config", e))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| SftError::io(path, e))?;
            let mut user: Value =
                serde_json::from_str(&text).map_err(|e| SftError::json(path.display().to_string(), e))?;
            if user.get("extractor").is_some() || user.get("encoder").is_some() || user.get("decoder").is_some() {
                user = serde_json::json!({ "model": user });
            }
            merge(&mut value, user);
        }
        for o in overrides {
            set_path(&mut value, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| SftError::Config(format!("config does not match schema: {e}")))?;
        cfg.model.link();
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, else taken as a string.
pub fn set_path(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| SftError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| SftError::Config(format!("override `{key}`: `{part}` is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(SftError::Config(format!("override `{key}`: unknown key `{part}`")));
        }
        let next = obj.get_mut(*part).unwrap();
        if i + 1 == parts.len() {
            *next = value;
            return Ok(());
        }
        node = next;
    }
    Ok(())
}
