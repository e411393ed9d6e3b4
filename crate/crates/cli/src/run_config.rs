//! The resolved configuration written next to every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use holitok::unified::{DownstreamConfig, UnifiedConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub preset: String,
    pub seed: u64,
    pub out: PathBuf,
    /// Everything set explicitly, from the config file and from flags.
    pub overrides: Map<String, Value>,
    pub resolved: Value,
}

impl RunConfig {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Reads a JSON object from `--config`, or an empty one.
pub fn read_overrides(path: Option<&Path>) -> Result<Map<String, Value>> {
    let Some(path) = path else { return Ok(Map::new()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))? {
        Value::Object(m) => Ok(m),
        _ => Err(holitok::Error::Config(format!("{} must hold a JSON object", path.display())).into()),
    }
}

/// Downstream run settings; also the format of its `--config` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamSettings {
    /// Frozen tokenizer checkpoint.
    pub tokenizer: Option<PathBuf>,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub training: DownstreamConfig,
    pub model: UnifiedConfig,
}

impl Default for DownstreamSettings {
    fn default() -> Self {
        Self {
            tokenizer: None,
            corpus_size: 8,
            corpus_seed: 1,
            training: DownstreamConfig::default(),
            model: UnifiedConfig::default(),
        }
    }
}

impl DownstreamSettings {
    /// A step count given without a schedule gets the toy schedule sized
    /// to it.
    pub fn from_overrides(overrides: &Map<String, Value>) -> Result<Self> {
        let mut s: Self = serde_json::from_value(Value::Object(overrides.clone()))?;
        let training = overrides.get("training").and_then(Value::as_object);
        if training.is_some_and(|t| t.contains_key("steps") && !t.contains_key("schedule")) {
            s.training.schedule = DownstreamConfig::toy(s.training.steps).schedule;
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn steps_resize_schedule() {
        let m = json!({ "training": { "steps": 100 }, "corpus_size": 4 });
        let s = DownstreamSettings::from_overrides(m.as_object().unwrap()).unwrap();
        assert_eq!(s.corpus_size, 4);
        assert_eq!(s.training.schedule, DownstreamConfig::toy(100).schedule);
        let d = DownstreamSettings::from_overrides(&Map::new()).unwrap();
        assert_eq!(d.training, DownstreamConfig::default());
    }
}
