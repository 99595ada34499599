use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::config::{RunConfig, TaskSpec};
use super::manifest::{BackendInfo, RunManifest, TaskSummary, SCORE_MANIFEST};
use super::report::write_atomic;
use super::PipelineError;
use crate::backend::MlmBackend;
use crate::ingestion::{load_dataset, Example};
use crate::measures::{
    length_measure, length_stats, lexcov, precog, Measure, MeasureError, MeasureScore, ScoreRecord,
};
use crate::tokenizer::{tokenize, word_split, TokenSequence, Vocabulary};

/// An example left out of the scores file, with the first error it hit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedExample {
    pub task: String,
    pub id: String,
    pub error: String,
}

#[derive(Debug)]
pub struct ScoreRun {
    pub records: Vec<ScoreRecord>,
    pub failed: Vec<FailedExample>,
    pub manifest: RunManifest,
    pub scores_path: PathBuf,
    pub manifest_path: PathBuf,
}

impl ScoreRun {
    pub fn exit_code(&self) -> i32 {
        if self.failed.is_empty() {
            0
        } else {
            1
        }
    }
}

struct Prepared {
    example: Example,
    seq: TokenSequence,
    words: Vec<String>,
}

fn prepare_task(
    task: &TaskSpec,
    vocab: &Vocabulary,
) -> Result<Vec<Prepared>, PipelineError> {
    let examples = load_dataset(&task.dataset, task.format, &task.name, &task.schema)
        .map_err(|e| PipelineError::Input(e.to_string()))?;
    examples
        .into_iter()
        .map(|example| {
            let seq = tokenize(&example.segment_a, example.segment_b.as_deref(), vocab).map_err(
                |e| PipelineError::Input(format!("task {} example {}: {e}", task.name, example.id)),
            )?;
            let mut words = word_split(&example.segment_a);
            if let Some(b) = &example.segment_b {
                words.extend(word_split(b));
            }
            Ok(Prepared { example, seq, words })
        })
        .collect()
}

fn score_example(
    p: &Prepared,
    config: &RunConfig,
    measures: &[Measure],
    vocab: &Vocabulary,
    backend: Option<&dyn MlmBackend>,
    stats: crate::measures::DatasetLengthStats,
) -> Result<Vec<ScoreRecord>, MeasureError> {
    // backend calls are keyed by task/id so ids may repeat across tasks
    let cache_id = format!("{}/{}", p.example.task, p.example.id);
    let mut out = Vec::with_capacity(measures.len());
    for &m in measures {
        let score: MeasureScore = match m {
            Measure::Precog => {
                let backend = backend.expect("checked before scoring");
                precog(&cache_id, &p.seq, vocab, backend, config.k)?
            }
            Measure::Lexcov => lexcov(&p.example.id, &p.words, vocab, config.lexcov_counting)?,
            Measure::Length => length_measure(&p.example.id, &p.seq, stats)?,
        };
        out.push(ScoreRecord {
            eid: p.example.id.clone(),
            task: p.example.task.clone(),
            measure: m,
            value: score.value,
            detail: score.detail,
            k: (m == Measure::Precog).then_some(config.k),
            t_wordpiece: p.seq.content_len(),
            t_words: p.words.len(),
        });
    }
    Ok(out)
}

fn render_scores(records: &[ScoreRecord]) -> Result<String, PipelineError> {
    let mut text = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| PipelineError::Output(e.to_string()))?;
        text.push_str(&line);
        text.push('\n');
    }
    Ok(text)
}

/// Reads a scores file written by [`run_score`].
pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::Input(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                PipelineError::Input(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

/// Scores every configured example and writes the scores file and manifest.
///
/// Examples that fail (e.g. an unreachable backend after retries) are left
/// out of the scores file and listed in the manifest; the run goes on.
pub fn run_score(
    config: &RunConfig,
    vocab: &Vocabulary,
    backend: Option<&dyn MlmBackend>,
) -> Result<ScoreRun, PipelineError> {
    let started = Utc::now();
    config.validate()?;
    let measures = config.selected_measures();
    let needs_backend = measures.contains(&Measure::Precog);
    if needs_backend && backend.is_none() {
        return Err(PipelineError::Config(
            "precog needs a backend: give a backend URL, a mock corpus or a cache".into(),
        ));
    }

    let mut manifest = RunManifest::new("score", config, config.k, started);
    if let Some(v) = &config.vocab {
        manifest.record_input(v)?;
    }
    if let Some(c) = &config.backend.mock_corpus {
        manifest.record_input(c)?;
    }
    if let (true, Some(b)) = (needs_backend, backend) {
        manifest.backend = Some(BackendInfo {
            kind: b.kind().to_string(),
            model: b.model_id()?,
            fingerprint: b.fingerprint(config.k)?.to_string(),
        });
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| PipelineError::Config(format!("cannot start worker pool: {e}")))?;

    let mut records = Vec::new();
    let mut failed = Vec::new();
    for task in &config.tasks {
        manifest.record_input(&task.dataset)?;
        let prepared = prepare_task(task, vocab)?;
        let stats = length_stats(prepared.iter().map(|p| &p.seq)).map_err(|_| {
            PipelineError::Input(format!("task {}: dataset has no examples", task.name))
        })?;
        let results: Vec<_> = pool.install(|| {
            prepared
                .par_iter()
                .map(|p| score_example(p, config, &measures, vocab, backend, stats))
                .collect()
        });
        let mut summary = TaskSummary {
            task: task.name.clone(),
            examples: prepared.len(),
            scored: 0,
            failed: 0,
            predicted: Default::default(),
            missing_predictions: Default::default(),
        };
        for (p, result) in prepared.iter().zip(results) {
            match result {
                Ok(r) => {
                    summary.scored += 1;
                    records.extend(r);
                }
                Err(e) => {
                    warn!(task = %task.name, id = %p.example.id, "example failed: {e}");
                    summary.failed += 1;
                    failed.push(FailedExample {
                        task: task.name.clone(),
                        id: p.example.id.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
        info!(task = %task.name, examples = summary.examples, failed = summary.failed, "scored");
        manifest.tasks.push(summary);
    }

    let scores_path = config.scores_path();
    write_atomic(&scores_path, render_scores(&records)?.as_bytes())?;
    let manifest_path = scores_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(SCORE_MANIFEST);
    manifest.failed = failed.clone();
    manifest.outputs = vec![scores_path.display().to_string()];
    manifest.finish(&manifest_path)?;

    Ok(ScoreRun {
        records,
        failed,
        manifest,
        scores_path,
        manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::UnigramBackend;
    use crate::ingestion::TaskSchema;
    use std::collections::BTreeMap;

    fn fixture(dir: &Path) -> (RunConfig, Vocabulary) {
        fs::write(
            dir.join("vocab.txt"),
            "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nthe\ncat\nsat\non\nmat\n.\n",
        )
        .unwrap();
        fs::write(
            dir.join("d.jsonl"),
            concat!(
                "{\"id\": \"1\", \"a\": \"the cat sat.\", \"label\": \"x\"}\n",
                "{\"id\": \"2\", \"a\": \"the zebra\", \"label\": \"y\"}\n",
                "{\"id\": \"3\", \"a\": \"cat\", \"b\": \"on the mat\", \"label\": \"x\"}\n",
            ),
        )
        .unwrap();
        let cfg = RunConfig {
            vocab: Some(dir.join("vocab.txt")),
            out: dir.join("out"),
            k: 2,
            jobs: 2,
            tasks: vec![TaskSpec {
                name: "t".into(),
                dataset: dir.join("d.jsonl"),
                format: crate::ingestion::DatasetFormat::Jsonl,
                schema: TaskSchema::default(),
                predictions: BTreeMap::new(),
            }],
            ..RunConfig::default()
        };
        let vocab = Vocabulary::load(dir.join("vocab.txt")).unwrap();
        (cfg, vocab)
    }

    #[test]
    fn three_examples_three_measures() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, vocab) = fixture(dir.path());
        let corpus = [tokenize("the the cat", None, &vocab).unwrap()];
        let mock = UnigramBackend::from_corpus(&corpus, &vocab).unwrap();
        let run = run_score(&cfg, &vocab, Some(&mock)).unwrap();
        assert_eq!(run.records.len(), 9);
        assert_eq!(run.exit_code(), 0);
        let back = read_scores(&run.scores_path).unwrap();
        assert_eq!(back, run.records);

        // "the zebra": the [UNK]; top-2 is [the, cat]
        let r = &run.records[3];
        assert_eq!((r.eid.as_str(), r.measure), ("2", Measure::Precog));
        assert_eq!(r.value, 0.5);
        assert_eq!(r.k, Some(2));
        let lex = &run.records[4];
        assert_eq!(lex.value, 0.5);
        assert_eq!(lex.t_words, 2);
        // lengths 4, 2, 4
        assert_eq!(run.records[2].value, 1.0);
        assert_eq!(run.records[5].value, 0.0);

        let m = RunManifest::load(&run.manifest_path).unwrap();
        assert_eq!(m.tasks[0].scored, 3);
        assert_eq!(m.backend.unwrap().kind, "mock-unigram");
        assert_eq!(m.inputs.len(), 2);
    }

    #[test]
    fn precog_without_backend_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, vocab) = fixture(dir.path());
        let err = run_score(&cfg, &vocab, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let cfg = RunConfig {
            measures: vec![Measure::Lexcov],
            ..cfg
        };
        let run = run_score(&cfg, &vocab, None).unwrap();
        assert_eq!(run.records.len(), 3);
        assert!(run.manifest.backend.is_none());
    }
}
