//! Run-level configuration: everything that affects results, snapshotted
//! into the run manifest.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calibration::DEFAULT_BINS;
use crate::diagnosis::DiagnosisConfig;
use crate::intervention::InterventionConfig;
use crate::sampling::SamplingConfig;

pub const DEFAULT_CONCURRENCY: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub sampling: SamplingConfig,
    pub diagnosis: DiagnosisConfig,
    pub intervention: InterventionConfig,
    /// ECE bin count.
    pub bins: usize,
    /// Questions processed together, and the in-flight request limit.
    /// Does not affect results.
    pub concurrency: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::default(),
            diagnosis: DiagnosisConfig::default(),
            intervention: InterventionConfig::default(),
            bins: DEFAULT_BINS,
            concurrency: DEFAULT_CONCURRENCY,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid config: {0}")]
pub struct ConfigError(pub String);

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sampling
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        self.diagnosis
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        self.intervention
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        if self.bins == 0 {
            return Err(ConfigError("bins must be >= 1".into()));
        }
        if self.concurrency == 0 {
            return Err(ConfigError("concurrency must be >= 1".into()));
        }
        Ok(())
    }

    /// Dotted paths of result-affecting settings that differ from `other`.
    pub fn semantic_diff(&self, other: &RunConfig) -> Vec<String> {
        let strip = |c: &RunConfig| {
            let mut v = serde_json::to_value(c).expect("config serializes");
            if let Value::Object(m) = &mut v {
                m.remove("concurrency");
            }
            v
        };
        let mut out = Vec::new();
        diff_values("", &strip(self), &strip(other), &mut out);
        out
    }
}

fn diff_values(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match (x.get(k), y.get(k)) {
                    (Some(va), Some(vb)) => diff_values(&path, va, vb, out),
                    _ => out.push(path),
                }
            }
        }
        _ if a != b => out.push(prefix.to_string()),
        _ => {}
    }
}
