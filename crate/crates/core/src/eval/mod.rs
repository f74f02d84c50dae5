//! Binary confusion-matrix metrics, ROC analysis and cross-validation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {value} at index {index} is outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("sensitivity is undefined: no positive samples (TP + FN = 0)")]
    SensitivityUndefined,
    #[error("specificity is undefined: no negative samples (TN + FP = 0)")]
    SpecificityUndefined,
    #[error("ROC analysis needs both classes, only {0} samples present")]
    SingleClass(&'static str),
    #[error("a report needs at least one fold")]
    NoFolds,
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionMatrix { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    /// Element-wise sum, e.g. to pool folds.
    pub fn merged(&self, other: &ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix::new(
            self.tp + other.tp,
            self.tn + other.tn,
            self.fp + other.fp,
            self.fn_ + other.fn_,
        )
    }
}

fn check_pairs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(i));
    }
    Ok(())
}

/// Counts outcomes when a sample is called positive iff `score >= threshold`.
pub fn confusion_matrix(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionMatrix> {
    check_pairs(scores, labels)?;
    if let Some((index, &value)) = scores.iter().enumerate().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
        return Err(EvalError::ScoreOutOfRange { index, value });
    }
    let mut cm = ConfusionMatrix::default();
    for (&s, &positive) in scores.iter().zip(labels) {
        match (s >= threshold, positive) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Sensitivity, specificity and accuracy as unrounded percentages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

pub fn sensitivity(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.positives() == 0 {
        return Err(EvalError::SensitivityUndefined);
    }
    Ok(100.0 * cm.tp as f64 / cm.positives() as f64)
}

pub fn specificity(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.negatives() == 0 {
        return Err(EvalError::SpecificityUndefined);
    }
    Ok(100.0 * cm.tn as f64 / cm.negatives() as f64)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(EvalError::Empty);
    }
    Ok(100.0 * (cm.tp + cm.tn) as f64 / cm.total() as f64)
}

pub fn binary_metrics(cm: &ConfusionMatrix) -> Result<BinaryMetrics> {
    Ok(BinaryMetrics {
        sensitivity: sensitivity(cm)?,
        specificity: specificity(cm)?,
        accuracy: accuracy(cm)?,
    })
}

/// Points of the threshold sweep, from (0, 0) to (1, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` pairs.
    pub points: Vec<(f64, f64)>,
    /// Threshold producing each point; the first is `+∞`.
    pub thresholds: Vec<f64>,
}

struct Sweep {
    /// Cumulative (tp, fp) after each distinct score, highest first.
    steps: Vec<(u64, u64)>,
    thresholds: Vec<f64>,
    positives: u64,
    negatives: u64,
}

fn sweep(scores: &[f64], labels: &[bool]) -> Result<Sweep> {
    check_pairs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 {
        return Err(EvalError::SingleClass("negative"));
    }
    if negatives == 0 {
        return Err(EvalError::SingleClass("positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut steps = Vec::new();
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((tp, fp));
        thresholds.push(s);
    }
    Ok(Sweep {
        steps,
        thresholds,
        positives,
        negatives,
    })
}

/// ROC curve and trapezoidal AUC over all distinct score thresholds.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(RocCurve, f64)> {
    let sw = sweep(scores, labels)?;
    let (p, n) = (sw.positives as f64, sw.negatives as f64);
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    // Twice the area, in units of 1/(P·N), accumulated exactly.
    let mut doubled: u128 = 0;
    let (mut prev_tp, mut prev_fp) = (0u64, 0u64);
    for (&(tp, fp), &t) in sw.steps.iter().zip(&sw.thresholds) {
        doubled += u128::from(fp - prev_fp) * u128::from(tp + prev_tp);
        points.push((fp as f64 / n, tp as f64 / p));
        thresholds.push(t);
        (prev_tp, prev_fp) = (tp, fp);
    }
    let auc = doubled as f64 / (2.0 * p * n);
    Ok((RocCurve { points, thresholds }, auc))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, computed from mid-ranks.
pub fn mann_whitney_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let sw = sweep(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are doubled so mid-ranks stay integral.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let doubled_mid = (i + 1 + j) as u128;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        doubled_rank_sum += doubled_mid * pos_in_tie;
        i = j;
    }
    let p = u128::from(sw.positives);
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2.0 * sw.positives as f64 * sw.negatives as f64))
}

/// Round-half-even to `places` decimals.
pub fn round_half_even(value: f64, places: i32) -> f64 {
    let scale = 10f64.powi(places);
    (value * scale).round_ties_even() / scale
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: usize,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
}

/// Per-fold metric rows and their mean, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub phase: String,
    pub folds: Vec<FoldRow>,
    pub average: AverageRow,
}

/// Outcome of one validation fold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldResult {
    pub metrics: BinaryMetrics,
    pub auc: Option<f64>,
}

impl FoldResult {
    pub fn from_confusion(cm: &ConfusionMatrix, auc: Option<f64>) -> Result<Self> {
        Ok(FoldResult {
            metrics: binary_metrics(cm)?,
            auc,
        })
    }

    /// Thresholded metrics and AUC from positive-class scores.
    pub fn from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Self> {
        let cm = confusion_matrix(scores, labels, threshold)?;
        let (_, auc) = roc_auc(scores, labels)?;
        Self::from_confusion(&cm, Some(auc))
    }
}

/// Builds a report whose average row is the arithmetic mean of the folds.
/// The AUC column is averaged only when every fold has one.
pub fn cross_validate_report(results: &[FoldResult], phase: impl Into<String>) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(EvalError::NoFolds);
    }
    let k = results.len() as f64;
    let mean = |f: fn(&FoldResult) -> f64| results.iter().map(f).sum::<f64>() / k;
    let auc = results
        .iter()
        .map(|r| r.auc)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / k);
    Ok(MetricsReport {
        phase: phase.into(),
        folds: results
            .iter()
            .enumerate()
            .map(|(i, r)| FoldRow {
                fold: i + 1,
                sensitivity: r.metrics.sensitivity,
                specificity: r.metrics.specificity,
                accuracy: r.metrics.accuracy,
                auc: r.auc,
            })
            .collect(),
        average: AverageRow {
            sensitivity: mean(|r| r.metrics.sensitivity),
            specificity: mean(|r| r.metrics.specificity),
            accuracy: mean(|r| r.metrics.accuracy),
            auc,
        },
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Tab-separated table with one row per fold and an average row;
    /// percentages at 2 decimals and AUC at 4.
    pub fn to_table(&self) -> String {
        let with_auc = self.average.auc.is_some();
        let mut out = String::new();
        out.push_str("Iteration\tSensitivity (%)\tSpecificity (%)\tAccuracy (%)");
        if with_auc {
            out.push_str("\tAUC");
        }
        out.push('\n');
        let cells = |label: String, se: f64, sp: f64, acc: f64, auc: Option<f64>| {
            let mut line = format!(
                "{label}\t{:.2}\t{:.2}\t{:.2}",
                round_half_even(se, 2),
                round_half_even(sp, 2),
                round_half_even(acc, 2)
            );
            if with_auc {
                match auc {
                    Some(a) => {
                        let _ = write!(line, "\t{:.4}", round_half_even(a, 4));
                    }
                    None => line.push_str("\t-"),
                }
            }
            line.push('\n');
            line
        };
        for row in &self.folds {
            out.push_str(&cells(
                row.fold.to_string(),
                row.sensitivity,
                row.specificity,
                row.accuracy,
                row.auc,
            ));
        }
        let a = &self.average;
        out.push_str(&cells(
            "Average".into(),
            a.sensitivity,
            a.specificity,
            a.accuracy,
            a.auc,
        ));
        out
    }
}
