//! Binned accuracy analysis of measure scores against classifier correctness.
//!
//! Measure values are analyzed on a 0–100 point scale. Bins of `width`
//! points are upper-inclusive, `(lower, upper]`, except the first, which
//! also holds 0: `[0, width]`.

mod stats;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingestion::PredictionRecord;
use crate::measures::{Measure, ScoreRecord};

pub use stats::{pearson, regularized_incomplete_beta, Pearson};

/// Boundary between the two reporting intervals, in points.
pub const INTERVAL_SPLIT_POINT: f64 = 80.0;

/// Values this close to a bin edge are treated as lying on it.
const EDGE_SNAP: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("bin width {0} must be between 1 and 100 and divide 100")]
    InvalidWidth(u32),
    #[error("scores mix measures {0} and {1}")]
    MixedMeasures(Measure, Measure),
    #[error("example {example_id}: measure value {value} outside [0, 1]")]
    ValueOutOfRange { example_id: String, value: f64 },
    #[error("no scored example has a prediction")]
    EmptyJoin,
    #[error("task {0} was binned with different edges")]
    MismatchedEdges(String),
    #[error("no tasks to aggregate")]
    NoTasks,
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("need at least 3 non-empty bins, got {0}")]
    TooFewBins(usize),
    #[error("zero variance: correlation is undefined")]
    ZeroVariance,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("bin counts sum to {actual}, expected total {expected}")]
    TotalMismatch { expected: usize, actual: usize },
}

/// Bin width in points; always divides 100.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct BinWidth(u32);

impl BinWidth {
    pub fn new(width: u32) -> Result<Self, AnalyticsError> {
        if width == 0 || width > 100 || 100 % width != 0 {
            return Err(AnalyticsError::InvalidWidth(width));
        }
        Ok(Self(width))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn bin_count(self) -> usize {
        (100 / self.0) as usize
    }
}

impl Default for BinWidth {
    fn default() -> Self {
        Self(20)
    }
}

impl TryFrom<u32> for BinWidth {
    type Error = AnalyticsError;

    fn try_from(v: u32) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<BinWidth> for u32 {
    fn from(w: BinWidth) -> u32 {
        w.0
    }
}

/// What x-value represents a bin when correlating bins with accuracy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Abscissa {
    #[default]
    Midpoint,
    /// Mean measure value of the bin's examples.
    Mean,
}

impl FromStr for Abscissa {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "midpoint" => Ok(Self::Midpoint),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown abscissa {other:?} (expected midpoint or mean)")),
        }
    }
}

impl fmt::Display for Abscissa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Midpoint => "midpoint",
            Self::Mean => "mean",
        })
    }
}

/// One scored example joined with whether the classifier got it right.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub task: String,
    pub example_id: String,
    pub measure: Measure,
    /// Measure value in `[0, 1]`.
    pub value: f64,
    pub correct: bool,
}

impl Outcome {
    /// Value on the 0–100 scale, snapped onto an integer when within
    /// rounding noise of it.
    pub fn points(&self) -> f64 {
        to_points(self.value)
    }
}

pub fn to_points(value: f64) -> f64 {
    let p = value * 100.0;
    let r = p.round();
    if (p - r).abs() < EDGE_SNAP {
        r
    } else {
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    /// True for the first bin, which is closed at its lower edge.
    pub includes_lower: bool,
    pub count: usize,
    pub correct_count: usize,
    /// Sum of member values in points.
    pub value_sum: f64,
}

impl Bin {
    fn empty(lower: f64, upper: f64, includes_lower: bool) -> Self {
        Self {
            lower,
            upper,
            includes_lower,
            count: 0,
            correct_count: 0,
            value_sum: 0.0,
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct_count as f64 / self.count as f64)
    }

    pub fn midpoint(&self) -> f64 {
        (self.lower + self.upper) / 2.0
    }

    pub fn mean_value(&self) -> Option<f64> {
        (self.count > 0).then(|| self.value_sum / self.count as f64)
    }

    pub fn contains(&self, points: f64) -> bool {
        (points > self.lower || (self.includes_lower && points == self.lower)) && points <= self.upper
    }

    pub fn label(&self) -> String {
        let open = if self.includes_lower { '[' } else { '(' };
        format!("{open}{},{}]", self.lower, self.upper)
    }

    fn add(&mut self, o: &Outcome) {
        self.count += 1;
        self.correct_count += usize::from(o.correct);
        self.value_sum += o.points();
    }

    fn same_edges(&self, other: &Bin) -> bool {
        self.lower == other.lower
            && self.upper == other.upper
            && self.includes_lower == other.includes_lower
    }
}

fn check_outcomes(outcomes: &[Outcome]) -> Result<(), AnalyticsError> {
    if let Some(first) = outcomes.first() {
        if let Some(other) = outcomes.iter().find(|o| o.measure != first.measure) {
            return Err(AnalyticsError::MixedMeasures(first.measure, other.measure));
        }
    }
    if let Some(bad) = outcomes
        .iter()
        .find(|o| !(0.0..=1.0).contains(&o.value) || o.value.is_nan())
    {
        return Err(AnalyticsError::ValueOutOfRange {
            example_id: bad.example_id.clone(),
            value: bad.value,
        });
    }
    Ok(())
}

/// Empty bins covering 0–100 at `width`.
pub fn empty_bins(width: BinWidth) -> Vec<Bin> {
    let w = width.get() as f64;
    (0..width.bin_count())
        .map(|i| Bin::empty(i as f64 * w, (i + 1) as f64 * w, i == 0))
        .collect()
}

fn bin_index(points: f64, width: BinWidth, n: usize) -> usize {
    if points <= 0.0 {
        return 0;
    }
    let idx = (points / width.get() as f64).ceil() as usize;
    idx.saturating_sub(1).min(n - 1)
}

/// Partitions outcomes of a single measure into `100 / width` bins.
pub fn bin_examples(outcomes: &[Outcome], width: BinWidth) -> Result<Vec<Bin>, AnalyticsError> {
    check_outcomes(outcomes)?;
    let mut bins = empty_bins(width);
    let n = bins.len();
    for o in outcomes {
        bins[bin_index(o.points(), width, n)].add(o);
    }
    Ok(bins)
}

/// The `(80,100]` / `[0,80]` split used for per-task reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSplit {
    pub high: Bin,
    pub low: Bin,
}

impl IntervalSplit {
    pub fn total(&self) -> usize {
        self.high.count + self.low.count
    }

    /// Accuracy over both intervals together.
    pub fn overall_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (self.high.correct_count + self.low.correct_count) as f64 / total as f64)
    }
}

pub fn interval_split(outcomes: &[Outcome]) -> Result<IntervalSplit, AnalyticsError> {
    if outcomes.is_empty() {
        return Err(AnalyticsError::EmptyJoin);
    }
    check_outcomes(outcomes)?;
    let mut high = Bin::empty(INTERVAL_SPLIT_POINT, 100.0, false);
    let mut low = Bin::empty(0.0, INTERVAL_SPLIT_POINT, true);
    for o in outcomes {
        if o.points() > INTERVAL_SPLIT_POINT {
            high.add(o);
        } else {
            low.add(o);
        }
    }
    Ok(IntervalSplit { high, low })
}

/// Joins score records with predictions on `(task, example id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Join {
    pub outcomes: Vec<Outcome>,
    /// Score records with no prediction, as `(task, id)`.
    pub unmatched: Vec<(String, String)>,
}

pub fn join_outcomes(scores: &[ScoreRecord], predictions: &[PredictionRecord]) -> Join {
    let index: HashMap<(&str, &str), bool> = predictions
        .iter()
        .map(|p| ((p.task.as_str(), p.example_id.as_str()), p.correct))
        .collect();
    let mut join = Join::default();
    for s in scores {
        match index.get(&(s.task.as_str(), s.eid.as_str())) {
            Some(&correct) => join.outcomes.push(Outcome {
                task: s.task.clone(),
                example_id: s.eid.clone(),
                measure: s.measure,
                value: s.value,
                correct,
            }),
            None => join.unmatched.push((s.task.clone(), s.eid.clone())),
        }
    }
    join
}

/// Pools per-task bins: per bin, `sum(correct) / sum(count)`.
pub fn weighted_task_aggregate(
    per_task: &BTreeMap<String, Vec<Bin>>,
) -> Result<Vec<Bin>, AnalyticsError> {
    let mut tasks = per_task.iter();
    let (_, first) = tasks.next().ok_or(AnalyticsError::NoTasks)?;
    let mut pooled: Vec<Bin> = first.clone();
    for (task, bins) in tasks {
        if bins.len() != pooled.len() || bins.iter().zip(&pooled).any(|(a, b)| !a.same_edges(b)) {
            return Err(AnalyticsError::MismatchedEdges(task.clone()));
        }
        for (p, b) in pooled.iter_mut().zip(bins) {
            p.count += b.count;
            p.correct_count += b.correct_count;
            p.value_sum += b.value_sum;
        }
    }
    Ok(pooled)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub measure: Measure,
    pub r: f64,
    pub p_value: f64,
    pub n_bins: usize,
}

/// Pearson correlation between bin position and bin accuracy, skipping
/// empty bins.
pub fn correlate_measure(
    measure: Measure,
    bins: &[Bin],
    abscissa: Abscissa,
) -> Result<CorrelationReport, AnalyticsError> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = bins
        .iter()
        .filter_map(|b| {
            let acc = b.accuracy()?;
            let x = match abscissa {
                Abscissa::Midpoint => b.midpoint(),
                Abscissa::Mean => b.mean_value()?,
            };
            Some((x, acc))
        })
        .unzip();
    if xs.len() < 3 {
        return Err(AnalyticsError::TooFewBins(xs.len()));
    }
    let p = pearson(&xs, &ys)?;
    Ok(CorrelationReport {
        measure,
        r: p.r,
        p_value: p.p_value,
        n_bins: p.n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoveragePoint {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub percent: f64,
    /// Percent of examples in this bin or any lower one.
    pub cumulative_percent: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageCurve {
    pub points: Vec<CoveragePoint>,
}

pub fn coverage_curve(bins: &[Bin], total: usize) -> Result<CoverageCurve, AnalyticsError> {
    let actual: usize = bins.iter().map(|b| b.count).sum();
    if actual != total || total == 0 {
        return Err(AnalyticsError::TotalMismatch {
            expected: total,
            actual,
        });
    }
    let mut running = 0usize;
    let points = bins
        .iter()
        .map(|b| {
            running += b.count;
            CoveragePoint {
                lower: b.lower,
                upper: b.upper,
                count: b.count,
                percent: 100.0 * b.count as f64 / total as f64,
                cumulative_percent: 100.0 * running as f64 / total as f64,
                accuracy: b.accuracy(),
            }
        })
        .collect();
    Ok(CoverageCurve { points })
}
