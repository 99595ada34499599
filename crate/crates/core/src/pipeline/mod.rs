//! Score and analyze stages, with a durable scores file between them.

mod analyze;
pub mod config;
mod manifest;
mod report;
mod score;

use std::fs;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

pub use analyze::{run_analyze, AnalyzeRun, CorrelationFailure};
pub use config::{BackendSpec, RunConfig, TaskSpec};
pub use manifest::{BackendInfo, RunManifest, TaskSummary, ANALYZE_MANIFEST, SCORE_MANIFEST};
pub use report::{file_digest, write_atomic};
pub use score::{read_scores, run_score, FailedExample, ScoreRun};

use crate::backend::{
    BackendError, CacheOnlyBackend, CachedBackend, Fingerprint, MlmBackend, PredictionCache,
    RemoteBackend, RemoteConfig, UnigramBackend,
};
use crate::tokenizer::{tokenize, Vocabulary};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no scored example has a prediction: {0}")]
    EmptyJoin(String),
    #[error("cannot write output {0}")]
    Output(String),
}

impl PipelineError {
    /// 2 for configuration and input problems, 1 for run failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Input(_) => 2,
            PipelineError::Backend(BackendError::Cache { .. } | BackendError::InvalidK) => 2,
            PipelineError::Backend(_) | PipelineError::EmptyJoin(_) | PipelineError::Output(_) => 1,
        }
    }
}

pub fn load_vocabulary(config: &RunConfig) -> Result<Arc<Vocabulary>, PipelineError> {
    let path = config
        .vocab
        .as_ref()
        .ok_or_else(|| PipelineError::Config("no vocabulary file given".into()))?;
    let vocab = Vocabulary::load(path)
        .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    Ok(Arc::new(vocab.with_cased(config.cased)))
}

/// Tokenizes a mock corpus file, one sequence per non-blank line.
pub fn load_mock_backend(
    path: &std::path::Path,
    vocab: &Vocabulary,
) -> Result<UnigramBackend, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::Input(format!("cannot read {}: {e}", path.display())))?;
    let corpus = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| tokenize(l, None, vocab))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    UnigramBackend::from_corpus(&corpus, vocab).map_err(|e| match e {
        BackendError::EmptyCorpus => {
            PipelineError::Input(format!("{}: mock corpus is empty", path.display()))
        }
        other => other.into(),
    })
}

/// Builds the configured backend stack, or `None` when nothing is configured.
///
/// A cache alone runs in cache-only mode; with a remote or mock source it
/// wraps that source.
pub fn build_backend(
    config: &RunConfig,
    vocab: Arc<Vocabulary>,
) -> Result<Option<Arc<dyn MlmBackend>>, PipelineError> {
    let spec = &config.backend;
    let primary: Option<Arc<dyn MlmBackend>> = match (&spec.url, &spec.mock_corpus) {
        (Some(_), Some(_)) => {
            return Err(PipelineError::Config(
                "choose either a backend URL or a mock corpus, not both".into(),
            ))
        }
        (Some(url), None) => {
            let mut rc = RemoteConfig::new(url.clone());
            rc.max_in_flight = config.jobs.max(1);
            if let Some(n) = spec.max_attempts {
                rc.max_attempts = n.max(1);
            }
            if let Some(ms) = spec.retry_base_ms {
                rc.base_delay = Duration::from_millis(ms);
            }
            Some(Arc::new(RemoteBackend::new(rc, vocab.clone())?))
        }
        (None, Some(path)) => Some(Arc::new(load_mock_backend(path, &vocab)?)),
        (None, None) => None,
    };
    let Some(cache_path) = &spec.cache else {
        return Ok(primary);
    };
    let cache = Arc::new(PredictionCache::open(cache_path)?);
    Ok(Some(match primary {
        Some(p) => Arc::new(CachedBackend::new(p, cache)),
        None => Arc::new(CacheOnlyBackend::new(
            cache,
            config.k,
            spec.fingerprint.clone().map(Fingerprint::from_string),
        )?),
    }))
}
