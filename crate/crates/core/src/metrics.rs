//! Five-class sleep staging metrics: accuracy, balanced accuracy, Cohen's
//! kappa and support-weighted F1, all derived from a confusion matrix.

use crate::stage::SleepStage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("label sequences differ in length ({truth} true vs {predicted} predicted)")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
}

const K: usize = SleepStage::COUNT;

/// Rows are true stages, columns predicted stages, both in `W, N1, N2, N3, REM` order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; K]; K]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn add(&mut self, truth: SleepStage, predicted: SleepStage) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    /// Support of class `c` (row sum).
    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    /// Predictions of class `c` (column sum).
    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    fn recall(&self, c: usize) -> Option<f64> {
        let support = self.row_sum(c);
        (support > 0).then(|| self.true_positives(c) as f64 / support as f64)
    }

    fn precision(&self, c: usize) -> Option<f64> {
        let predicted = self.col_sum(c);
        (predicted > 0).then(|| self.true_positives(c) as f64 / predicted as f64)
    }

    fn f1(&self, c: usize) -> f64 {
        let p = self.precision(c).unwrap_or(0.0);
        let r = self.recall(c).unwrap_or(0.0);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn nonempty(&self) -> Result<f64, MetricsError> {
        match self.total() {
            0 => Err(MetricsError::EmptyMatrix),
            n => Ok(n as f64),
        }
    }
}

/// Tallies paired labels.
pub fn confusion(truth: &[SleepStage], predicted: &[SleepStage]) -> Result<ConfusionMatrix, MetricsError> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch { truth: truth.len(), predicted: predicted.len() });
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(predicted) {
        cm.add(t, p);
    }
    Ok(cm)
}

/// Same as [`confusion`] for textual labels.
pub fn confusion_from_str<S: AsRef<str>>(truth: &[S], predicted: &[S]) -> Result<ConfusionMatrix, MetricsError> {
    let parse = |v: &[S]| -> Result<Vec<SleepStage>, MetricsError> {
        v.iter()
            .map(|s| s.as_ref().parse().map_err(|_| MetricsError::UnknownLabel(s.as_ref().to_string())))
            .collect()
    };
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch { truth: truth.len(), predicted: predicted.len() });
    }
    confusion(&parse(truth)?, &parse(predicted)?)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let n = cm.nonempty()?;
    let tp: u64 = (0..K).map(|c| cm.true_positives(c)).sum();
    Ok(tp as f64 / n)
}

/// Mean recall over classes with non-zero support.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    cm.nonempty()?;
    let recalls: Vec<f64> = (0..K).filter_map(|c| cm.recall(c)).collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Cohen's kappa plus a flag set when chance agreement is 1 (kappa reported as 0).
pub fn kappa_with_flag(cm: &ConfusionMatrix) -> Result<(f64, bool), MetricsError> {
    let n = cm.nonempty()?;
    let p_o = accuracy(cm)?;
    let p_e: f64 = (0..K).map(|c| cm.row_sum(c) as f64 * cm.col_sum(c) as f64).sum::<f64>() / (n * n);
    if p_e >= 1.0 {
        return Ok((0.0, true));
    }
    Ok(((p_o - p_e) / (1.0 - p_e), false))
}

pub fn kappa(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    kappa_with_flag(cm).map(|(k, _)| k)
}

/// Per-class F1 weighted by class support.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let n = cm.nonempty()?;
    Ok((0..K).map(|c| cm.row_sum(c) as f64 * cm.f1(c)).sum::<f64>() / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub kappa: f64,
    pub weighted_f1: f64,
    /// Set when chance agreement was 1 and kappa was reported as 0.
    pub kappa_degenerate: bool,
}

impl MetricSet {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self, MetricsError> {
        let (kappa, kappa_degenerate) = kappa_with_flag(cm)?;
        Ok(MetricSet {
            accuracy: accuracy(cm)?,
            balanced_accuracy: balanced_accuracy(cm)?,
            kappa,
            weighted_f1: weighted_f1(cm)?,
            kappa_degenerate,
        })
    }

    /// Component-wise mean; `None` for an empty slice.
    pub fn mean(sets: &[MetricSet]) -> Option<MetricSet> {
        if sets.is_empty() {
            return None;
        }
        let n = sets.len() as f64;
        let avg = |f: fn(&MetricSet) -> f64| sets.iter().map(f).sum::<f64>() / n;
        Some(MetricSet {
            accuracy: avg(|m| m.accuracy),
            balanced_accuracy: avg(|m| m.balanced_accuracy),
            kappa: avg(|m| m.kappa),
            weighted_f1: avg(|m| m.weighted_f1),
            kappa_degenerate: sets.iter().any(|m| m.kappa_degenerate),
        })
    }
}
