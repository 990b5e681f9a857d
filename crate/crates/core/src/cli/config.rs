use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::ffcl::{FocalParams, TrainConfig};
use crate::model::ModelConfig;
use crate::patchflow::{Aggregation, PatchSpec};
use crate::phantom::{PhantomConfig, SplitCounts};
use crate::refinement::RefinementConfig;

use super::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub threshold: f64,
    /// Dense grid stride for whole-image prediction; `None` predicts the
    /// labelled extraction windows only.
    pub grid_stride: Option<usize>,
    pub aggregation: Aggregation,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            grid_stride: None,
            aggregation: Aggregation::default(),
        }
    }
}

/// Every tunable of the pipeline in one document. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub splits: SplitCounts,
    pub patches: PatchSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub focal: FocalParams,
    pub predict: PredictConfig,
    pub refinement: RefinementConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            splits: SplitCounts {
                train: 20,
                val: 5,
                test: 5,
            },
            patches: PatchSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            focal: FocalParams::default(),
            predict: PredictConfig::default(),
            refinement: RefinementConfig::default(),
        }
    }
}

/// Parses `value` as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{assignment}`")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad config key `{key}`")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("`{key}`: `{part}` is not inside a section")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("`{key}` does not name a config field")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

impl RunConfig {
    /// Reads the optional config file, applies `KEY=VALUE` overrides (dotted
    /// keys, JSON values) and validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        serde_json::from_value(root).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn write_effective(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("effective_config.json"), self.to_json())?;
        Ok(())
    }
}
