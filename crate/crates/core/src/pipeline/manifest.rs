use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::report::write_atomic;
use super::score::FailedExample;
use super::PipelineError;

pub const SCORE_MANIFEST: &str = "score-manifest.json";
pub const ANALYZE_MANIFEST: &str = "analyze-manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub kind: String,
    pub model: String,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub examples: usize,
    pub scored: usize,
    pub failed: usize,
    /// Examples with a prediction, per prediction set (analyze only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub predicted: BTreeMap<String, usize>,
    /// Examples lacking a prediction, per prediction set (analyze only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub missing_predictions: BTreeMap<String, usize>,
}

/// Everything needed to reproduce a run's numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub started_at: String,
    pub finished_at: String,
    pub config: RunConfig,
    /// Fixed methodological choices, stamped for the record.
    pub masking: String,
    pub specials_masked: bool,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendInfo>,
    /// Input file path to sha256.
    pub inputs: BTreeMap<String, String>,
    pub tasks: Vec<TaskSummary>,
    #[serde(default)]
    pub failed: Vec<FailedExample>,
    /// Score records with no prediction, as `predictions/task/id`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unjoined: Vec<String>,
    pub outputs: Vec<String>,
}

pub(crate) fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

impl RunManifest {
    pub(crate) fn new(stage: &str, config: &RunConfig, k: usize, started: DateTime<Utc>) -> Self {
        Self {
            tool: "precog".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            stage: stage.into(),
            started_at: timestamp(started),
            finished_at: String::new(),
            config: config.clone(),
            masking: "wordpiece".into(),
            specials_masked: false,
            k,
            backend: None,
            inputs: BTreeMap::new(),
            tasks: Vec::new(),
            failed: Vec::new(),
            unjoined: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub(crate) fn record_input(&mut self, path: &Path) -> Result<(), PipelineError> {
        let digest = super::report::file_digest(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub(crate) fn finish(&mut self, path: &Path) -> Result<(), PipelineError> {
        self.finished_at = timestamp(Utc::now());
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| PipelineError::Output(format!("{}: {e}", path.display())))?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Input(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
    }
}
