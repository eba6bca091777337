//! Run configuration: defaults, overlaid by a JSON file, overlaid by dotted
//! `--section.key value` flags.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use contextlm::model::ModelConfig;
use contextlm::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::usage;

pub const SECTIONS: [&str; 4] = ["model", "train", "data", "run"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Byte-level corpus file.
    pub corpus: Option<PathBuf>,
    /// Trailing fraction of the corpus held out for validation.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub run: RunSection,
}

/// A `--section.key value` pair pulled out of the argument list.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: String,
}

fn override_key(arg: &str) -> Option<&str> {
    let key = arg.strip_prefix("--")?;
    let (section, _) = key.split_once('.')?;
    SECTIONS.contains(&section).then_some(key)
}

/// Splits dotted overrides from the arguments clap should see. Accepts
/// `--model.chunk_size 8` and `--model.chunk_size=8`.
pub fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<Override>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(text) = arg.to_str() else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match text.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (text, None),
        };
        let Some(key) = override_key(key) else {
            rest.push(arg);
            continue;
        };
        let key = key.to_string();
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| usage(format!("--{key} needs a value")))?,
        };
        overrides.push(Override { key, value });
    }
    Ok((rest, overrides))
}

/// Recursive object merge; anything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

/// String and optional fields take the flag text verbatim; others parse as
/// JSON (numbers, booleans) and fall back to a string.
fn override_value(current: &Value, raw: &str) -> Value {
    match current {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Null if raw == "null" => Value::Null,
        // Unset optional fields are paths.
        Value::Null => Value::String(raw.to_string()),
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    }
}

/// Precedence: overrides > file > `base`.
pub fn resolve(base: RunConfig, file: Option<&Path>, overrides: &[Override]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(base)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
        let parsed: Value =
            serde_json::from_str(&text).map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
        // Validate the file on its own so errors name it.
        serde_json::from_value::<RunConfig>(parsed.clone())
            .map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
        merge(&mut value, parsed);
    }
    let mut errors = Vec::new();
    for o in overrides {
        let mut slot = Some(&mut value);
        for part in o.key.split('.') {
            slot = slot.and_then(|v| v.get_mut(part));
        }
        match slot {
            Some(slot) => {
                let v = override_value(slot, &o.value);
                *slot = v;
            }
            None => errors.push(format!("unknown config key `{}`", o.key)),
        }
    }
    if !errors.is_empty() {
        return Err(usage(errors.join("; ")));
    }
    let config: RunConfig = serde_json::from_value(value).map_err(|e| usage(format!("config override: {e}")))?;
    Ok(config)
}

impl RunConfig {
    /// Every violated constraint across sections, reported together.
    pub fn validate(&self) -> Result<(), contextlm::Error> {
        let mut errors = Vec::new();
        for r in [self.model.validate(), self.train.validate()] {
            if let Err(contextlm::Error::Config(e)) = r {
                errors.extend(e);
            }
        }
        if self.train.seq_len > self.model.max_seq_len {
            errors.push(format!(
                "train.seq_len ({}) exceeds model.max_seq_len ({})",
                self.train.seq_len, self.model.max_seq_len
            ));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 0.5) {
            errors.push(format!("data.val_fraction must be in (0, 0.5), got {}", self.data.val_fraction));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(contextlm::Error::Config(errors))
        }
    }

    /// The corpus path, checked to exist.
    pub fn corpus_path(&self) -> Result<&Path> {
        let path = self.data.corpus.as_deref().ok_or_else(|| {
            usage("data.corpus is not set (use --data.corpus PATH or a config file)".to_string())
        })?;
        if !path.is_file() {
            return Err(usage(format!("data.corpus: no such file {}", path.display())));
        }
        Ok(path)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.resolved.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
