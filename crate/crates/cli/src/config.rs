use std::path::Path;

use lstd::evaluation::{ApMetric, DetectConfig};
use lstd::transfer::TrainRun;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Everything a command can be configured with. A config file only needs
/// the keys it changes; the rest come from the command's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainRun,
    pub detect: DetectConfig,
    pub metric: ApMetric,
    /// Held-out images used for the background heat statistic.
    pub heat_images: usize,
}

impl RunConfig {
    pub fn with_train(train: TrainRun) -> Self {
        Self {
            train,
            detect: DetectConfig::default(),
            metric: ApMetric::default(),
            heat_images: 50,
        }
    }

    /// Overlays the JSON file at `path`, if any, onto `self`. Unknown keys
    /// anywhere in the file are rejected.
    pub fn overlay(self, path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut base = serde_json::to_value(&self).expect("config serializes");
        merge(&mut base, file);
        serde_json::from_value(base).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        format!("{}\n", serde_json::to_string_pretty(self).expect("config serializes"))
    }
}

/// Recursive object merge; non-object values in `patch` replace `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}
