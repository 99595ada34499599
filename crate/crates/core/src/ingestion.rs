//! Loading labelled evaluation datasets and per-example model predictions.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("unknown dataset format {0:?} (expected jsonl or tsv)")]
    UnknownFormat(String),
    #[error("{path}: missing column {column:?}{}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    MissingColumn {
        path: String,
        column: String,
        line: Option<usize>,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path} line {line}: duplicate id {id:?}")]
    DuplicateId { path: String, id: String, line: usize },
    #[error("{path}: empty first segment on line(s) {lines:?}")]
    EmptySegment { path: String, lines: Vec<usize> },
    #[error("{path} line {line}: prediction for unknown example id {id:?}")]
    UnknownExampleId { path: String, id: String, line: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Tsv,
}

impl FromStr for DatasetFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json-lines" => Ok(Self::Jsonl),
            "tsv" => Ok(Self::Tsv),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Jsonl => "jsonl",
            Self::Tsv => "tsv",
        })
    }
}

/// Which fields of a dataset row hold the id, the segments, and the label.
///
/// Without an explicit `id` column, a column named `id` is used when present
/// and the 1-based data row number otherwise. The second-segment column is
/// optional in the data: where it is absent or empty the example is single-
/// segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSchema {
    pub id: Option<String>,
    pub a: String,
    pub b: Option<String>,
    pub label: String,
    /// Applied to predicted labels before comparing with the gold label.
    pub label_map: BTreeMap<String, String>,
}

impl Default for TaskSchema {
    fn default() -> Self {
        Self {
            id: None,
            a: "a".into(),
            b: Some("b".into()),
            label: "label".into(),
            label_map: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub task: String,
    pub segment_a: String,
    pub segment_b: Option<String>,
    pub gold_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRecord {
    pub example_id: String,
    pub task: String,
    pub predicted_label: String,
    pub correct: bool,
}

/// Predictions joined to a dataset, plus the examples that had none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    pub records: Vec<PredictionRecord>,
    pub missing: Vec<String>,
}

impl PredictionSet {
    pub fn accuracy(&self) -> Option<f64> {
        accuracy(&self.records)
    }
}

pub fn accuracy(records: &[PredictionRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let correct = records.iter().filter(|r| r.correct).count();
    Some(correct as f64 / records.len() as f64)
}

fn io_err(path: &Path, e: impl fmt::Display) -> IngestError {
    IngestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn value_text(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

/// A raw row: named fields plus its line number in the file.
struct Row {
    line: usize,
    fields: HashMap<String, String>,
}

fn read_jsonl_rows(path: &Path) -> Result<Vec<Row>, IngestError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let obj: serde_json::Map<String, Value> =
            serde_json::from_str(line).map_err(|e| IngestError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        let fields = obj
            .iter()
            .filter_map(|(k, v)| value_text(v).map(|s| (k.clone(), s)))
            .collect();
        rows.push(Row {
            line: i + 1,
            fields,
        });
    }
    Ok(rows)
}

fn read_tsv_rows(path: &Path) -> Result<(Vec<String>, Vec<Row>), IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .has_headers(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| io_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| IngestError::Parse {
            path: path.display().to_string(),
            line: e.position().map_or(i + 2, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let fields = headers
            .iter()
            .cloned()
            .zip(rec.iter().map(str::to_string))
            .collect();
        rows.push(Row {
            line: i + 2,
            fields,
        });
    }
    Ok((headers, rows))
}

/// Loads one labelled dataset file into examples, in file order.
pub fn load_dataset(
    path: impl AsRef<Path>,
    format: DatasetFormat,
    task: &str,
    schema: &TaskSchema,
) -> Result<Vec<Example>, IngestError> {
    let path = path.as_ref();
    let pstr = || path.display().to_string();
    let (headers, rows) = match format {
        DatasetFormat::Jsonl => (None, read_jsonl_rows(path)?),
        DatasetFormat::Tsv => {
            let (h, r) = read_tsv_rows(path)?;
            (Some(h), r)
        }
    };

    if let Some(headers) = &headers {
        let mut required = vec![&schema.a, &schema.label];
        if let Some(id) = &schema.id {
            required.push(id);
        }
        for col in required {
            if !headers.contains(col) {
                return Err(IngestError::MissingColumn {
                    path: pstr(),
                    column: col.clone(),
                    line: Some(1),
                });
            }
        }
    }

    let id_column = schema.id.clone().unwrap_or_else(|| "id".to_string());
    let mut examples = Vec::with_capacity(rows.len());
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut empty_rows = Vec::new();
    for (n, row) in rows.iter().enumerate() {
        let field = |name: &str| -> Result<&String, IngestError> {
            row.fields.get(name).ok_or_else(|| IngestError::MissingColumn {
                path: pstr(),
                column: name.to_string(),
                line: Some(row.line),
            })
        };
        let id = match row.fields.get(&id_column) {
            Some(id) => id.trim().to_string(),
            None if schema.id.is_some() => return Err(field(&id_column).unwrap_err()),
            None => (n + 1).to_string(),
        };
        let segment_a = field(&schema.a)?.clone();
        let gold_label = field(&schema.label)?.trim().to_string();
        let segment_b = schema
            .b
            .as_ref()
            .and_then(|b| row.fields.get(b))
            .filter(|s| !s.trim().is_empty())
            .cloned();
        if segment_a.trim().is_empty() {
            empty_rows.push(row.line);
            continue;
        }
        if seen.insert(id.clone(), row.line).is_some() {
            return Err(IngestError::DuplicateId {
                path: pstr(),
                id,
                line: row.line,
            });
        }
        examples.push(Example {
            id,
            task: task.to_string(),
            segment_a,
            segment_b,
            gold_label,
        });
    }
    if !empty_rows.is_empty() {
        return Err(IngestError::EmptySegment {
            path: pstr(),
            lines: empty_rows,
        });
    }
    Ok(examples)
}

/// Writes examples as dataset JSON-lines `{id, a, b?, label}`.
pub fn write_examples_jsonl(examples: &[Example], path: impl AsRef<Path>) -> Result<(), IngestError> {
    #[derive(Serialize)]
    struct Line<'a> {
        id: &'a str,
        a: &'a str,
        #[serde(skip_serializing_if = "Option::is_none")]
        b: Option<&'a str>,
        label: &'a str,
    }
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for ex in examples {
        let line = Line {
            id: &ex.id,
            a: &ex.segment_a,
            b: ex.segment_b.as_deref(),
            label: &ex.gold_label,
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| io_err(path, e))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Loads predictions JSON-lines `{id, label}` and joins them to `dataset`.
///
/// Examples without a prediction are reported in [`PredictionSet::missing`]
/// and excluded from the records.
pub fn load_predictions(
    path: impl AsRef<Path>,
    dataset: &[Example],
    label_map: &BTreeMap<String, String>,
) -> Result<PredictionSet, IngestError> {
    let path = path.as_ref();
    let rows = read_jsonl_rows(path)?;
    let index: HashMap<&str, usize> = dataset
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect();
    let mut predicted: Vec<Option<String>> = vec![None; dataset.len()];
    for row in rows {
        let get = |name: &str| {
            row.fields
                .get(name)
                .map(|s| s.trim().to_string())
                .ok_or_else(|| IngestError::MissingColumn {
                    path: path.display().to_string(),
                    column: name.to_string(),
                    line: Some(row.line),
                })
        };
        let id = get("id")?;
        let label = get("label")?;
        let Some(&i) = index.get(id.as_str()) else {
            return Err(IngestError::UnknownExampleId {
                path: path.display().to_string(),
                id,
                line: row.line,
            });
        };
        if predicted[i].is_some() {
            return Err(IngestError::DuplicateId {
                path: path.display().to_string(),
                id,
                line: row.line,
            });
        }
        let label = label_map.get(&label).map_or(label, |m| m.trim().to_string());
        predicted[i] = Some(label);
    }

    let mut records = Vec::with_capacity(dataset.len());
    let mut missing = Vec::new();
    for (ex, pred) in dataset.iter().zip(predicted) {
        match pred {
            Some(predicted_label) => records.push(PredictionRecord {
                example_id: ex.id.clone(),
                task: ex.task.clone(),
                correct: predicted_label == ex.gold_label.trim(),
                predicted_label,
            }),
            None => missing.push(ex.id.clone()),
        }
    }
    if !missing.is_empty() {
        warn!(
            path = %path.display(),
            missing = missing.len(),
            "examples without a prediction are excluded from accuracy"
        );
    }
    Ok(PredictionSet { records, missing })
}
