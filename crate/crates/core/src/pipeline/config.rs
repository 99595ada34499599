use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::analytics::{Abscissa, BinWidth};
use crate::backend::DEFAULT_TOP_K;
use crate::ingestion::{DatasetFormat, TaskSchema};
use crate::measures::{Measure, OovCounting};

/// Where top-k predictions come from. A remote URL or a mock corpus is the
/// primary source; `cache` wraps it, or serves alone in cache-only mode.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    pub url: Option<String>,
    pub cache: Option<PathBuf>,
    pub mock_corpus: Option<PathBuf>,
    /// Cache-only mode: which fingerprint to serve when the cache holds several.
    pub fingerprint: Option<String>,
    pub max_attempts: Option<u32>,
    pub retry_base_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub dataset: PathBuf,
    #[serde(default = "default_format")]
    pub format: DatasetFormat,
    #[serde(default)]
    pub schema: TaskSchema,
    /// Prediction set name (e.g. a model variant) to predictions file.
    #[serde(default)]
    pub predictions: BTreeMap<String, PathBuf>,
}

fn default_format() -> DatasetFormat {
    DatasetFormat::Jsonl
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub vocab: Option<PathBuf>,
    pub cased: bool,
    pub backend: BackendSpec,
    pub k: usize,
    pub bin_width: BinWidth,
    pub measures: Vec<Measure>,
    pub tasks: Vec<TaskSpec>,
    pub out: PathBuf,
    /// Scores file read by `analyze`; defaults to `<out>/scores.jsonl`.
    pub scores: Option<PathBuf>,
    pub jobs: usize,
    pub lexcov_counting: OovCounting,
    pub corr_abscissa: Abscissa,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            vocab: None,
            cased: false,
            backend: BackendSpec::default(),
            k: DEFAULT_TOP_K,
            bin_width: BinWidth::default(),
            measures: Measure::ALL.to_vec(),
            tasks: Vec::new(),
            out: PathBuf::from("precog-out"),
            scores: None,
            jobs: 8,
            lexcov_counting: OovCounting::Occurrences,
            corr_abscissa: Abscissa::Midpoint,
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses a TOML config; relative paths resolve against the file's directory.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.vocab, &mut cfg.scores, &mut cfg.backend.cache, &mut cfg.backend.mock_corpus]
            .into_iter()
            .flatten()
        {
            rebase(base, p);
        }
        rebase(base, &mut cfg.out);
        for task in &mut cfg.tasks {
            rebase(base, &mut task.dataset);
            for p in task.predictions.values_mut() {
                rebase(base, p);
            }
        }
        Ok(cfg)
    }

    pub fn scores_path(&self) -> PathBuf {
        self.scores
            .clone()
            .unwrap_or_else(|| self.out.join("scores.jsonl"))
    }

    /// Selected measures, deduplicated, in canonical order.
    pub fn selected_measures(&self) -> Vec<Measure> {
        Measure::ALL
            .into_iter()
            .filter(|m| self.measures.contains(m))
            .collect()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.k == 0 {
            return err("k must be at least 1");
        }
        if self.measures.is_empty() {
            return err("select at least one measure");
        }
        if self.jobs == 0 {
            return err("jobs must be at least 1");
        }
        if self.tasks.is_empty() {
            return err("no tasks configured");
        }
        let mut names = std::collections::HashSet::new();
        for t in &self.tasks {
            if !names.insert(t.name.as_str()) {
                return Err(PipelineError::Config(format!("task {:?} listed twice", t.name)));
            }
            if t.name.contains('/') {
                return Err(PipelineError::Config(format!(
                    "task name {:?} must not contain '/'",
                    t.name
                )));
            }
        }
        if self.backend.url.is_some() && self.backend.mock_corpus.is_some() {
            return err("choose either a backend URL or a mock corpus, not both");
        }
        Ok(())
    }
}
