//! Run configuration files: a JSON document or `section.key = value` lines.

use std::path::{Path, PathBuf};

use latte::DType;
use latte_model::ModelConfig;
use latte_tasks::MqarConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub eval_every: usize,
    /// Held-out examples (MQAR) or windows (text) per evaluation.
    pub eval_examples: usize,
    pub stop_at_metric: Option<f64>,
    pub precision: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            eval_every: 250,
            eval_examples: 500,
            stop_at_metric: None,
            precision: "f32".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextSection {
    /// Byte corpus; the synthetic generator is used when absent.
    pub path: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
    pub held_out: f64,
    /// Extra evaluation lengths written to `extrapolation.csv`.
    pub eval_lens: Vec<usize>,
}

impl Default for TextSection {
    fn default() -> Self {
        Self {
            path: None,
            synthetic_bytes: 1 << 20,
            synthetic_seed: 0,
            held_out: 0.1,
            eval_lens: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mqar: MqarConfig,
    pub text: TextSection,
    pub train: TrainSection,
}

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

/// Splice `value` into the default tree at a dotted path that must exist.
fn set_path(tree: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| usage(format!("`{key}`: `{}` is not a section", parts[..i].join("."))))?;
        if !map.contains_key(*part) {
            return Err(usage(format!("unknown config key `{key}`")));
        }
        node = map.get_mut(*part).unwrap();
    }
    if node.is_object() {
        return Err(usage(format!("`{key}` is a section, not a key")));
    }
    *node = value;
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| usage(format!("config: {e}")))?
        } else {
            let mut tree = serde_json::to_value(RunConfig::default()).expect("config serializes");
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, raw) = line
                    .split_once('=')
                    .ok_or_else(|| usage(format!("line {}: expected key = value", n + 1)))?;
                set_path(&mut tree, key.trim(), parse_value(raw.trim()))?;
            }
            serde_json::from_value(tree).map_err(|e| usage(format!("config: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        self.mqar.validate().map_err(|e| usage(e.to_string()))?;
        self.precision()?;
        if !(0.0..1.0).contains(&self.text.held_out) {
            return Err(usage("text.held_out must lie in [0, 1)"));
        }
        if self.train.steps == 0 {
            return Err(usage("train.steps must be positive"));
        }
        Ok(())
    }

    pub fn precision(&self) -> CliResult<DType> {
        self.train.precision.parse().map_err(usage)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Flattened `section.key` names accepted by the key = value form.
pub fn known_keys() -> Vec<String> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        if let Value::Object(m) = v {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                if child.is_object() {
                    walk(&key, child, out);
                } else {
                    out.push(key);
                }
            }
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(RunConfig::default()).expect("config serializes"), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use latte_model::MixerKind;

    #[test]
    fn key_value_overrides_defaults() {
        let c = RunConfig::parse(
            "# mqar cell\nmodel.mixer_kind = macchiato_rglru\nmodel.d_model = 64\nmqar.num_pairs = 8\n\ntrain.stop_at_metric = 0.9\ntext.path = corpus.txt\n",
        )
        .unwrap();
        assert_eq!(c.model.mixer_kind, MixerKind::MacchiatoRglru);
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.mqar.num_pairs, 8);
        assert_eq!(c.train.stop_at_metric, Some(0.9));
        assert_eq!(c.text.path.as_deref(), Some(Path::new("corpus.txt")));
        assert_eq!(c.model.n_layers, ModelConfig::default().n_layers);
    }

    #[test]
    fn json_and_key_value_agree() {
        let kv = RunConfig::parse("model.n_layers = 2\nmqar.seed = 3").unwrap();
        let json = RunConfig::parse(r#"{"model": {"n_layers": 2}, "mqar": {"seed": 3}}"#).unwrap();
        assert_eq!(kv, json);
        assert_eq!(kv.digest(), json.digest());
        assert_ne!(kv.digest(), RunConfig::default().digest());
    }

    #[test]
    fn unknown_and_invalid_keys_are_usage_errors() {
        for bad in [
            "model.n_layer = 2",
            "n_layers = 2",
            "model = 2",
            "model.d_model = 65",
            "model.mixer_kind = transformer",
            "garbage",
            "train.precision = f16",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(CliError::Usage(_))), "{bad}");
        }
        assert!(RunConfig::parse(r#"{"model": {"depth": 2}}"#).is_err());
    }

    #[test]
    fn every_field_is_reachable() {
        let keys = known_keys();
        assert!(keys.contains(&"model.mixer_kind".to_string()));
        assert!(keys.contains(&"mqar.test_examples".to_string()));
        assert!(keys.contains(&"train.eval_every".to_string()));
    }
}
