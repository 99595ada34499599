use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use chrono::Utc;
use tracing::warn;

use super::config::RunConfig;
use super::manifest::{RunManifest, TaskSummary, ANALYZE_MANIFEST};
use super::report::{
    bins_csv, correlation_json, coverage_csv, header_line, intervals_csv, write_atomic, BinRows,
    CorrelationEntry, CoverageRows, IntervalRow,
};
use super::score::read_scores;
use super::PipelineError;
use crate::analytics::{
    bin_examples, correlate_measure, coverage_curve, interval_split, join_outcomes,
    weighted_task_aggregate, Bin, CoverageCurve, IntervalSplit,
};
use crate::ingestion::{accuracy, load_dataset, load_predictions, PredictionRecord};
use crate::measures::{Measure, ScoreRecord};

pub const BINS_FILE: &str = "bins.csv";
pub const INTERVALS_FILE: &str = "intervals.csv";
pub const CORRELATION_FILE: &str = "correlation.json";
pub const COVERAGE_FILE: &str = "coverage.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrelationFailure {
    pub predictions: String,
    pub measure: Measure,
    pub error: String,
}

#[derive(Debug)]
pub struct AnalyzeRun {
    pub outputs: Vec<PathBuf>,
    pub correlation_failures: Vec<CorrelationFailure>,
    /// Score records with no prediction, as `predictions/task/id`.
    pub unjoined: Vec<String>,
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
}

impl AnalyzeRun {
    pub fn exit_code(&self) -> i32 {
        if self.correlation_failures.is_empty() {
            0
        } else {
            1
        }
    }
}

/// The `k` the scores were computed with, if any precog records exist.
fn scores_k(scores: &[ScoreRecord]) -> Result<Option<usize>, PipelineError> {
    let ks: BTreeSet<usize> = scores.iter().filter_map(|s| s.k).collect();
    match ks.len() {
        0 => Ok(None),
        1 => Ok(ks.into_iter().next()),
        _ => Err(PipelineError::Input(format!(
            "scores mix several k values: {ks:?}"
        ))),
    }
}

struct SetAnalysis {
    name: String,
    /// task -> (samples, accuracy) over every predicted example.
    global: BTreeMap<String, (usize, Option<f64>)>,
    /// (task, measure) -> split.
    splits: BTreeMap<(String, Measure), IntervalSplit>,
    pooled: BTreeMap<Measure, Vec<Bin>>,
    coverage: BTreeMap<Measure, CoverageCurve>,
}

/// Bins, splits and correlates joined scores and predictions; writes the
/// four reports and the analyze manifest into the output directory.
pub fn run_analyze(config: &RunConfig) -> Result<AnalyzeRun, PipelineError> {
    let started = Utc::now();
    config.validate()?;
    let measures = config.selected_measures();
    let scores_path = config.scores_path();
    let scores: Vec<ScoreRecord> = read_scores(&scores_path)?
        .into_iter()
        .filter(|s| measures.contains(&s.measure))
        .collect();
    let k = scores_k(&scores)?.unwrap_or(config.k);

    let mut manifest = RunManifest::new("analyze", config, k, started);
    manifest.record_input(&scores_path)?;

    // prediction set name -> records over all tasks
    let mut sets: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
    for task in &config.tasks {
        if task.predictions.is_empty() {
            continue;
        }
        manifest.record_input(&task.dataset)?;
        let dataset = load_dataset(&task.dataset, task.format, &task.name, &task.schema)
            .map_err(|e| PipelineError::Input(e.to_string()))?;
        let mut summary = TaskSummary {
            task: task.name.clone(),
            examples: dataset.len(),
            scored: scores
                .iter()
                .filter(|s| s.task == task.name)
                .map(|s| s.eid.as_str())
                .collect::<BTreeSet<_>>()
                .len(),
            failed: 0,
            predicted: BTreeMap::new(),
            missing_predictions: BTreeMap::new(),
        };
        for (name, path) in &task.predictions {
            manifest.record_input(path)?;
            let set = load_predictions(path, &dataset, &task.schema.label_map)
                .map_err(|e| PipelineError::Input(e.to_string()))?;
            if !set.missing.is_empty() {
                warn!(
                    task = %task.name,
                    predictions = %name,
                    missing = set.missing.len(),
                    "examples without a prediction are excluded"
                );
            }
            summary.predicted.insert(name.clone(), set.records.len());
            summary.missing_predictions.insert(name.clone(), set.missing.len());
            sets.entry(name.clone()).or_default().extend(set.records);
        }
        manifest.tasks.push(summary);
    }
    if sets.is_empty() {
        return Err(PipelineError::Config(
            "no prediction files configured for any task".into(),
        ));
    }

    let mut analyses = Vec::new();
    let mut unjoined = BTreeSet::new();
    let task_order: Vec<&str> = config.tasks.iter().map(|t| t.name.as_str()).collect();
    for (name, predictions) in &sets {
        let join = join_outcomes(&scores, predictions);
        for (task, id) in &join.unmatched {
            unjoined.insert(format!("{name}/{task}/{id}"));
        }
        if join.outcomes.is_empty() {
            let sample: Vec<String> = unjoined.iter().take(10).cloned().collect();
            return Err(PipelineError::EmptyJoin(format!(
                "prediction set {name:?} shares no example with {}; unmatched: {sample:?}",
                scores_path.display()
            )));
        }
        let mut analysis = SetAnalysis {
            name: name.clone(),
            global: BTreeMap::new(),
            splits: BTreeMap::new(),
            pooled: BTreeMap::new(),
            coverage: BTreeMap::new(),
        };
        for task in &task_order {
            let recs: Vec<PredictionRecord> = predictions
                .iter()
                .filter(|p| p.task == *task)
                .cloned()
                .collect();
            if !recs.is_empty() {
                analysis
                    .global
                    .insert(task.to_string(), (recs.len(), accuracy(&recs)));
            }
        }
        for &m in &measures {
            let mut per_task: BTreeMap<String, Vec<Bin>> = BTreeMap::new();
            let mut total = 0;
            for task in &task_order {
                let outcomes: Vec<_> = join
                    .outcomes
                    .iter()
                    .filter(|o| o.measure == m && o.task == *task)
                    .cloned()
                    .collect();
                if outcomes.is_empty() {
                    continue;
                }
                total += outcomes.len();
                let split = interval_split(&outcomes).map_err(|e| PipelineError::Input(e.to_string()))?;
                analysis.splits.insert((task.to_string(), m), split);
                let bins = bin_examples(&outcomes, config.bin_width)
                    .map_err(|e| PipelineError::Input(e.to_string()))?;
                per_task.insert(task.to_string(), bins);
            }
            if per_task.is_empty() {
                continue;
            }
            let pooled = weighted_task_aggregate(&per_task)
                .map_err(|e| PipelineError::Input(e.to_string()))?;
            let curve = coverage_curve(&pooled, total)
                .map_err(|e| PipelineError::Input(e.to_string()))?;
            analysis.coverage.insert(m, curve);
            analysis.pooled.insert(m, pooled);
        }
        analyses.push(analysis);
    }

    let settings: Vec<(&str, String)> = vec![
        ("masking", "wordpiece".into()),
        ("specials_masked", "false".into()),
        ("k", k.to_string()),
        ("lexcov_counting", lexcov_label(config)),
        ("bin_width", config.bin_width.get().to_string()),
        ("abscissa", config.corr_abscissa.to_string()),
    ];
    let header = header_line(ANALYZE_MANIFEST, &settings);

    let mut interval_rows = Vec::new();
    let mut bin_rows = Vec::new();
    let mut coverage_rows = Vec::new();
    let mut corr_entries = Vec::new();
    let mut failures = Vec::new();
    for a in &analyses {
        for task in &task_order {
            if let Some((samples, acc)) = a.global.get(*task) {
                interval_rows.push(IntervalRow::Global {
                    predictions: &a.name,
                    task,
                    samples: *samples,
                    accuracy: *acc,
                });
            }
            for &m in &measures {
                if let Some(split) = a.splits.get(&(task.to_string(), m)) {
                    interval_rows.push(IntervalRow::Split {
                        predictions: &a.name,
                        task,
                        measure: m,
                        split,
                    });
                }
            }
        }
        for (&m, bins) in &a.pooled {
            bin_rows.push(BinRows {
                predictions: &a.name,
                measure: m,
                bins,
            });
            coverage_rows.push(CoverageRows {
                predictions: &a.name,
                measure: m,
                curve: &a.coverage[&m],
            });
            match correlate_measure(m, bins, config.corr_abscissa) {
                Ok(report) => corr_entries.push(CorrelationEntry::Ok {
                    predictions: &a.name,
                    report,
                }),
                Err(e) => {
                    warn!(predictions = %a.name, measure = %m, "correlation undefined: {e}");
                    failures.push(CorrelationFailure {
                        predictions: a.name.clone(),
                        measure: m,
                        error: e.to_string(),
                    });
                    corr_entries.push(CorrelationEntry::Failed {
                        predictions: &a.name,
                        measure: m,
                        error: e.to_string(),
                    });
                }
            }
        }
    }

    let out = &config.out;
    let files = [
        (INTERVALS_FILE, intervals_csv(&header, &interval_rows)),
        (BINS_FILE, bins_csv(&header, &bin_rows)),
        (COVERAGE_FILE, coverage_csv(&header, &coverage_rows)),
        (
            CORRELATION_FILE,
            correlation_json(ANALYZE_MANIFEST, &settings, &corr_entries),
        ),
    ];
    let mut outputs = Vec::new();
    for (name, contents) in files {
        let path = out.join(name);
        write_atomic(&path, contents.as_bytes())?;
        outputs.push(path);
    }

    let unjoined: Vec<String> = unjoined.into_iter().collect();
    if !unjoined.is_empty() {
        warn!(count = unjoined.len(), "scored examples without a prediction");
    }
    manifest.unjoined = unjoined.clone();
    manifest.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
    let manifest_path = out.join(ANALYZE_MANIFEST);
    manifest.finish(&manifest_path)?;

    Ok(AnalyzeRun {
        outputs,
        correlation_failures: failures,
        unjoined,
        manifest,
        manifest_path,
    })
}

fn lexcov_label(config: &RunConfig) -> String {
    match config.lexcov_counting {
        crate::measures::OovCounting::Occurrences => "occurrences".into(),
        crate::measures::OovCounting::Set => "set".into(),
    }
}
