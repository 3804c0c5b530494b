//! Kiln-vs-rest evaluation: binarization, confusion counts, and
//! precision / recall / F1.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::arch::{ArchError, Network};
use crate::dataset::{Augment, ChipSet};
use crate::tensor::Tensor;

/// Class index of `brick_kiln`.
pub const KILN_INDEX: usize = 0;
/// Allowed deviation of a probability row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;
/// Placeholder printed for undefined metrics.
pub const UNDEFINED: &str = "—";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("probability row {row} sums to {sum}, not 1")]
    Normalization { row: usize, sum: f64 },
    #[error("threshold must be in (0, 1), got {0}")]
    Threshold(f64),
    #[error("expected probabilities of shape [N, C], got {0:?}")]
    Shape(Vec<usize>),
    #[error("{predicted} predictions but {actual} ground-truth values")]
    Length { predicted: usize, actual: usize },
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Positive iff `p(brick_kiln) ≥ threshold` (inclusive).
pub fn binarize(probabilities: &Tensor, threshold: f64) -> Result<Vec<bool>> {
    let threshold = check_threshold(threshold)?;
    Ok(kiln_probabilities(probabilities)?
        .into_iter()
        .map(|p| p >= threshold)
        .collect())
}

fn check_threshold(threshold: f64) -> Result<f64> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(threshold)
    } else {
        Err(EvalError::Threshold(threshold))
    }
}

/// Column `brick_kiln` of a row-normalised `[N, C]` probability matrix.
pub fn kiln_probabilities(probabilities: &Tensor) -> Result<Vec<f64>> {
    let shape = probabilities.shape();
    if shape.len() != 2 || shape[1] < KILN_INDEX + 1 {
        return Err(EvalError::Shape(shape.to_vec()));
    }
    probabilities
        .data()
        .chunks_exact(shape[1])
        .enumerate()
        .map(|(row, p)| {
            let sum: f64 = p.iter().sum();
            // False for a NaN sum as well.
            let normalised = (sum - 1.0).abs() <= ROW_SUM_TOLERANCE;
            if !normalised {
                return Err(EvalError::Normalization { row, sum });
            }
            Ok(p[KILN_INDEX])
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(predicted: &[bool], actual: &[bool]) -> Result<ConfusionCounts> {
    if predicted.len() != actual.len() {
        return Err(EvalError::Length {
            predicted: predicted.len(),
            actual: actual.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    /// `tp / (tp + fp)`; `None` when nothing was predicted positive.
    pub precision: Option<f64>,
    /// `tp / (tp + fn)`; `None` when there are no actual positives.
    pub recall: Option<f64>,
    /// Harmonic mean; `None` unless both precision and recall are defined.
    pub f1: Option<f64>,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
///
/// Written as `p · (r / m)` with `m` the arithmetic mean so that equal
/// inputs come back unchanged.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    let mean = (precision + recall) / 2.0;
    if mean == 0.0 {
        0.0
    } else {
        precision * (recall / mean)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(counts: ConfusionCounts, threshold: f64) -> MetricsReport {
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = precision.zip(recall).map(|(p, r)| f1_score(p, r));
    MetricsReport {
        threshold,
        counts,
        precision,
        recall,
        f1,
    }
}

pub const METRICS_HEADER: &str = "threshold,tp,fp,fn,tn,precision,recall,f1";

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |v| v.to_string())
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let c = self.counts;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.threshold,
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            fmt_metric(self.precision),
            fmt_metric(self.recall),
            fmt_metric(self.f1)
        )
    }
}

pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in reports {
        writeln!(out, "{}", r.csv_row()).unwrap();
    }
    out
}

pub fn write_metrics_csv(reports: &[MetricsReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_csv(reports)).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Kiln-vs-rest reports at each threshold for one fixed probability set.
pub fn evaluate_probabilities(
    probabilities: &Tensor,
    labels: &[usize],
    thresholds: &[f64],
) -> Result<Vec<MetricsReport>> {
    let actual: Vec<bool> = labels.iter().map(|&l| l == KILN_INDEX).collect();
    thresholds
        .iter()
        .map(|&t| {
            let predicted = binarize(probabilities, t)?;
            Ok(metrics(confusion(&predicted, &actual)?, t))
        })
        .collect()
}

/// Eval-mode class probabilities for every chip of `set`, in set order.
pub fn predict_set(network: &Network, set: &ChipSet, batch_size: usize) -> Result<Tensor> {
    let k = network.config().num_classes;
    let mut data = Vec::with_capacity(set.len() * k);
    for (chips, _) in set.batches(batch_size, None, Augment::None) {
        data.extend_from_slice(network.predict_proba(&chips)?.data());
    }
    Tensor::new(vec![set.len(), k], data).map_err(|e| EvalError::Arch(e.into()))
}

pub fn evaluate_network(
    network: &Network,
    set: &ChipSet,
    thresholds: &[f64],
    batch_size: usize,
) -> Result<Vec<MetricsReport>> {
    let probs = predict_set(network, set, batch_size)?;
    evaluate_probabilities(&probs, set.labels(), thresholds)
}

/// A published precision / recall / F1 triple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportedRow {
    pub name: &'static str,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Kiln-detection results of the compared models on the real test set.
pub const PUBLISHED_ROWS: [ReportedRow; 7] = [
    ReportedRow {
        name: "Two Staged R-CNN",
        precision: 0.9494,
        recall: 0.9494,
        f1: 0.9494,
    },
    ReportedRow {
        name: "ResNet-152",
        precision: 0.9906,
        recall: 0.8166,
        f1: 0.8952,
    },
    ReportedRow {
        name: "ResNet-50",
        precision: 0.9909,
        recall: 0.8416,
        f1: 0.9102,
    },
    ReportedRow {
        name: "ResNet-34",
        precision: 0.9892,
        recall: 0.8841,
        f1: 0.9337,
    },
    ReportedRow {
        name: "Inception-v3",
        precision: 0.9846,
        recall: 0.7413,
        f1: 0.8458,
    },
    ReportedRow {
        name: "Inception-ResNet-v2",
        precision: 0.9955,
        recall: 0.8552,
        f1: 0.9200,
    },
    ReportedRow {
        name: "Tiny-Inception-ResNet-v2",
        precision: 0.9854,
        recall: 0.9052,
        f1: 0.9435,
    },
];

/// `|f1(precision, recall) − reported|` for each `(precision, recall, reported_f1)`.
pub fn table2_consistency(rows: &[(f64, f64, f64)]) -> Vec<f64> {
    rows.iter()
        .map(|&(p, r, reported)| (f1_score(p, r) - reported).abs())
        .collect()
}
