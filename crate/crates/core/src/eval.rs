//! Confusion matrices, per-class and averaged metrics, and five-fold summaries.
//!
//! Zero-denominator ratios are defined as 0. Fold summaries use the sample
//! (n - 1) standard deviation.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::imaging::{round_channel, Raster};
use crate::label::{Label, NUM_CLASSES};

pub const EXPECTED_FOLDS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{preds} predictions but {truth} ground-truth labels")]
    LengthMismatch { preds: usize, truth: usize },
    #[error("unknown label {0}")]
    UnknownLabel(String),
    #[error("no samples to evaluate")]
    Empty,
    #[error("expected {EXPECTED_FOLDS} fold reports, got {0}")]
    WrongFoldCount(usize),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::LengthMismatch { .. } => "LengthMismatch",
            EvalError::UnknownLabel(_) => "UnknownLabel",
            EvalError::Empty => "EmptyEvaluation",
            EvalError::WrongFoldCount(_) => "WrongFoldCount",
        }
    }
}

/// Rows are true labels, columns predicted labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized: Option<[[f64; NUM_CLASSES]; NUM_CLASSES]>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, t: usize) -> u64 {
        self.counts[t].iter().sum()
    }

    pub fn col_total(&self, p: usize) -> u64 {
        self.counts.iter().map(|row| row[p]).sum()
    }

    /// Same counts with each nonzero row divided by its total; zero rows stay zero.
    pub fn normalize(&self) -> ConfusionMatrix {
        let mut norm = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        for (t, row) in self.counts.iter().enumerate() {
            let total = self.row_total(t);
            if total > 0 {
                for (p, &c) in row.iter().enumerate() {
                    norm[t][p] = c as f64 / total as f64;
                }
            }
        }
        ConfusionMatrix {
            counts: self.counts,
            normalized: Some(norm),
        }
    }
}

/// Tallies `(prediction, truth)` pairs given as class indices.
pub fn confusion(preds: &[usize], truth: &[usize]) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            truth: truth.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(truth) {
        if p >= NUM_CLASSES || t >= NUM_CLASSES {
            return Err(EvalError::UnknownLabel(format!("index {}", p.max(t))));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

pub fn confusion_labels(preds: &[Label], truth: &[Label]) -> Result<ConfusionMatrix, EvalError> {
    let p: Vec<usize> = preds.iter().map(|l| l.index()).collect();
    let t: Vec<usize> = truth.iter().map(|l| l.index()).collect();
    confusion(&p, &t)
}

/// Element-wise sum of the fold matrices, then row-normalized.
pub fn aggregate_and_normalize(cms: &[ConfusionMatrix]) -> ConfusionMatrix {
    let mut sum = ConfusionMatrix::default();
    for cm in cms {
        for t in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                sum.counts[t][p] += cm.counts[t][p];
            }
        }
    }
    sum.normalize()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    #[default]
    Macro,
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: [ClassMetrics; NUM_CLASSES],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

impl MetricsReport {
    /// `(precision, recall, f1)` under the chosen averaging.
    pub fn averaged(&self, avg: Averaging) -> (f64, f64, f64) {
        match avg {
            Averaging::Macro => (self.macro_precision, self.macro_recall, self.macro_f1),
            Averaging::Weighted => (
                self.weighted_precision,
                self.weighted_recall,
                self.weighted_f1,
            ),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let mut per_class = [ClassMetrics::default(); NUM_CLASSES];
    for (c, m) in per_class.iter_mut().enumerate() {
        let tp = cm.counts[c][c];
        let precision = ratio(tp, cm.col_total(c));
        let recall = ratio(tp, cm.row_total(c));
        *m = ClassMetrics {
            precision,
            recall,
            f1: f1_score(precision, recall),
            support: cm.row_total(c),
        };
    }
    let n = NUM_CLASSES as f64;
    let macro_of = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    let weighted_of = |f: fn(&ClassMetrics) -> f64| {
        per_class
            .iter()
            .map(|m| f(m) * m.support as f64)
            .sum::<f64>()
            / total as f64
    };
    Ok(MetricsReport {
        accuracy: ratio(cm.trace(), total),
        per_class,
        macro_precision: macro_of(|m| m.precision),
        macro_recall: macro_of(|m| m.recall),
        macro_f1: macro_of(|m| m.f1),
        weighted_precision: weighted_of(|m| m.precision),
        weighted_recall: weighted_of(|m| m.recall),
        weighted_f1: weighted_of(|m| m.f1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation. Needs at least two values.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldSummary {
    pub folds: Vec<MetricsReport>,
    pub accuracy: MeanStd,
    pub macro_precision: MeanStd,
    pub macro_recall: MeanStd,
    pub macro_f1: MeanStd,
    pub weighted_precision: MeanStd,
    pub weighted_recall: MeanStd,
    pub weighted_f1: MeanStd,
}

pub fn summarize_folds(reports: &[MetricsReport]) -> Result<FoldSummary, EvalError> {
    if reports.len() != EXPECTED_FOLDS {
        return Err(EvalError::WrongFoldCount(reports.len()));
    }
    let stat =
        |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(FoldSummary {
        folds: reports.to_vec(),
        accuracy: stat(|r| r.accuracy),
        macro_precision: stat(|r| r.macro_precision),
        macro_recall: stat(|r| r.macro_recall),
        macro_f1: stat(|r| r.macro_f1),
        weighted_precision: stat(|r| r.weighted_precision),
        weighted_recall: stat(|r| r.weighted_recall),
        weighted_f1: stat(|r| r.weighted_f1),
    })
}

impl FoldSummary {
    pub fn averaged(&self, avg: Averaging) -> (MeanStd, MeanStd, MeanStd) {
        match avg {
            Averaging::Macro => (self.macro_precision, self.macro_recall, self.macro_f1),
            Averaging::Weighted => (
                self.weighted_precision,
                self.weighted_recall,
                self.weighted_f1,
            ),
        }
    }
}

pub const TABLE_HEADER: &str = "Network | Accuracy (%) | Precision | Recall | F1 score";

/// One results-table row: accuracy in percent, the rest as fractions.
pub fn summary_row(name: &str, s: &FoldSummary, avg: Averaging) -> String {
    let (p, r, f) = s.averaged(avg);
    format!(
        "{name} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:.2} ± {:.2}",
        s.accuracy.mean * 100.0,
        s.accuracy.std * 100.0,
        p.mean,
        p.std,
        r.mean,
        r.std,
        f.mean,
        f.std
    )
}

/// Single-run row (no spread).
pub fn report_row(name: &str, m: &MetricsReport, avg: Averaging) -> String {
    let (p, r, f) = m.averaged(avg);
    format!(
        "{name} | {:.2} | {:.2} | {:.2} | {:.2}",
        m.accuracy * 100.0,
        p,
        r,
        f
    )
}

/// Fixed-width text rendering of a (normalized) matrix with class names.
pub fn render_matrix(cm: &ConfusionMatrix) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:>12}", "true\\pred");
    for l in Label::ALL {
        let _ = write!(out, "{:>11}", l.as_str());
    }
    out.push('\n');
    for (t, l) in Label::ALL.iter().enumerate() {
        let _ = write!(out, "{:>12}", l.as_str());
        for p in 0..NUM_CLASSES {
            match &cm.normalized {
                Some(n) => {
                    let _ = write!(out, "{:>11.3}", n[t][p]);
                }
                None => {
                    let _ = write!(out, "{:>11}", cm.counts[t][p]);
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Heat grid of the normalized matrix: `cell` pixels per entry, white (0) to dark blue (1).
pub fn render_matrix_png(cm: &ConfusionMatrix, cell: u32) -> Raster {
    let norm = cm
        .normalized
        .unwrap_or_else(|| cm.normalize().normalized.expect("normalize sets it"));
    let side = cell * NUM_CLASSES as u32;
    Raster::from_fn(side, side, |x, y| {
        let v = norm[(y / cell) as usize][(x / cell) as usize];
        [
            round_channel(255.0 * (1.0 - v) + 8.0 * v),
            round_channel(255.0 * (1.0 - v) + 48.0 * v),
            round_channel(255.0 * (1.0 - v) + 107.0 * v),
        ]
    })
}
