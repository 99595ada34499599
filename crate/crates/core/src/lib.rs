//! Pre-training coverage measures for text examples and their correlation
//! with classifier accuracy.
//!
//! Three per-example measures are computed against a masked language model
//! and its vocabulary:
//!
//! - **PreCog**: the fraction of content tokens the model recovers within its
//!   top-k predictions when that token alone is masked.
//! - **LexCov**: the fraction of words that are full vocabulary entries.
//! - **Length**: content length, min-max normalized over the dataset.
//!
//! Scores are joined with per-example predictions, binned, and correlated
//! with bin accuracy.

pub mod analytics;
pub mod backend;
pub mod ingestion;
pub mod measures;
pub mod pipeline;
pub mod selftest;
pub mod tokenizer;

pub use analytics::{
    bin_examples, correlate_measure, coverage_curve, interval_split, pearson,
    weighted_task_aggregate, Abscissa, Bin, BinWidth, CorrelationReport, CoverageCurve,
    IntervalSplit, Outcome, Pearson,
};
pub use backend::{
    make_masked_variants, BackendError, Fingerprint, MaskedVariant, MlmBackend, PredictionCache,
    TopKPrediction, DEFAULT_TOP_K,
};
pub use ingestion::{load_dataset, load_predictions, DatasetFormat, Example, PredictionRecord, TaskSchema};
pub use measures::{
    length_measure, length_stats, lexcov, precog, DatasetLengthStats, Measure, MeasureScore,
    OovCounting, ScoreRecord,
};
pub use pipeline::{run_analyze, run_score, PipelineError, RunConfig, RunManifest};
pub use tokenizer::{tokenize, word_split, TokenSequence, Vocabulary};
