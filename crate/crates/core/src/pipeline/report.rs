//! Report rendering. All reals are written with four decimals.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::analytics::{Bin, CorrelationReport, CoverageCurve, IntervalSplit};
use crate::measures::Measure;

pub(crate) fn f4(x: f64) -> String {
    // avoid "-0.0000"
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.4}")
}

fn opt4(x: Option<f64>) -> String {
    x.map(f4).unwrap_or_default()
}

/// Writes via a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let out_err = |e: &dyn std::fmt::Display| PipelineError::Output(format!("{}: {e}", path.display()));
    fs::create_dir_all(dir).map_err(|e| out_err(&e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| out_err(&e))?;
    tmp.write_all(contents).map_err(|e| out_err(&e))?;
    tmp.as_file().sync_all().map_err(|e| out_err(&e))?;
    tmp.persist(path).map_err(|e| out_err(&e.error))?;
    Ok(())
}

pub fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path)
        .map_err(|e| PipelineError::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Leading comment line tying a report to its manifest and run settings.
pub(crate) fn header_line(manifest: &str, settings: &[(&str, String)]) -> String {
    let mut line = format!("# precog report; manifest={manifest}");
    for (k, v) in settings {
        let _ = write!(line, "; {k}={v}");
    }
    line.push('\n');
    line
}

fn edge(x: f64) -> String {
    format!("{x}")
}

pub(crate) struct BinRows<'a> {
    pub predictions: &'a str,
    pub measure: Measure,
    pub bins: &'a [Bin],
}

pub(crate) fn bins_csv(header: &str, rows: &[BinRows<'_>]) -> String {
    let mut out = String::from(header);
    out.push_str("measure,bin_lower,bin_upper,count,accuracy,predictions\n");
    for r in rows {
        for b in r.bins {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.measure,
                edge(b.lower),
                edge(b.upper),
                b.count,
                opt4(b.accuracy()),
                r.predictions
            );
        }
    }
    out
}

pub(crate) enum IntervalRow<'a> {
    Global {
        predictions: &'a str,
        task: &'a str,
        samples: usize,
        accuracy: Option<f64>,
    },
    Split {
        predictions: &'a str,
        task: &'a str,
        measure: Measure,
        split: &'a IntervalSplit,
    },
}

pub(crate) fn intervals_csv(header: &str, rows: &[IntervalRow<'_>]) -> String {
    let mut out = String::from(header);
    out.push_str("task,measure,interval,samples,accuracy,predictions\n");
    for row in rows {
        match row {
            IntervalRow::Global {
                predictions,
                task,
                samples,
                accuracy,
            } => {
                let _ = writeln!(out, "{task},global,[0,100],{samples},{},{predictions}", opt4(*accuracy));
            }
            IntervalRow::Split {
                predictions,
                task,
                measure,
                split,
            } => {
                for b in [&split.high, &split.low] {
                    let _ = writeln!(
                        out,
                        "{task},{measure},\"{}\",{},{},{predictions}",
                        b.label(),
                        b.count,
                        opt4(b.accuracy())
                    );
                }
            }
        }
    }
    out
}

pub(crate) struct CoverageRows<'a> {
    pub predictions: &'a str,
    pub measure: Measure,
    pub curve: &'a CoverageCurve,
}

pub(crate) fn coverage_csv(header: &str, rows: &[CoverageRows<'_>]) -> String {
    let mut out = String::from(header);
    out.push_str("measure,bin_lower,bin_upper,count,percent,cumulative_percent,accuracy,predictions\n");
    for r in rows {
        for p in &r.curve.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.measure,
                edge(p.lower),
                edge(p.upper),
                p.count,
                f4(p.percent),
                f4(p.cumulative_percent),
                opt4(p.accuracy),
                r.predictions
            );
        }
    }
    out
}

pub(crate) enum CorrelationEntry<'a> {
    Ok {
        predictions: &'a str,
        report: CorrelationReport,
    },
    Failed {
        predictions: &'a str,
        measure: Measure,
        error: String,
    },
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// Hand-rendered so every real carries exactly four decimals.
pub(crate) fn correlation_json(
    manifest: &str,
    settings: &[(&str, String)],
    entries: &[CorrelationEntry<'_>],
) -> String {
    let mut out = String::from("{\n");
    let _ = writeln!(out, "  \"manifest\": {},", json_str(manifest));
    for (k, v) in settings {
        let _ = writeln!(out, "  {}: {},", json_str(k), json_str(v));
    }
    out.push_str("  \"correlations\": [");
    for (i, e) in entries.iter().enumerate() {
        out.push_str(if i == 0 { "\n" } else { ",\n" });
        match e {
            CorrelationEntry::Ok {
                predictions,
                report,
            } => {
                let _ = write!(
                    out,
                    "    {{\"measure\": {}, \"r\": {}, \"p\": {}, \"n_bins\": {}, \"predictions\": {}}}",
                    json_str(report.measure.as_str()),
                    f4(report.r),
                    f4(report.p_value),
                    report.n_bins,
                    json_str(predictions)
                );
            }
            CorrelationEntry::Failed {
                predictions,
                measure,
                error,
            } => {
                let _ = write!(
                    out,
                    "    {{\"measure\": {}, \"r\": null, \"p\": null, \"predictions\": {}, \"error\": {}}}",
                    json_str(measure.as_str()),
                    json_str(predictions),
                    json_str(error)
                );
            }
        }
    }
    if !entries.is_empty() {
        out.push('\n');
        out.push_str("  ");
    }
    out.push_str("]\n}\n");
    out
}
