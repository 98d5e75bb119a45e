//! Confusion-matrix metrics for multi-class problems.
//!
//! The headline metric is [`wacc`], the unweighted mean of per-class recall.
//! Unlike plain accuracy it gives a class with 115 samples the same say as a
//! class with 6705.

use std::io::Write;
use std::path::Path;

use ndarray::ArrayView2;
use thiserror::Error;

use crate::csvio;
use crate::ingest::IngestError;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {truth} labels vs {predicted} predictions")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("class {0} is present in every sample or in none; its one-vs-rest AUC is undefined")]
    DegenerateClass(usize),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    cells: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            cells: vec![0; classes * classes],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let classes = rows.len();
        assert!(rows.iter().all(|r| r.len() == classes), "matrix must be square");
        Self {
            classes,
            cells: rows.concat(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.cells[truth * self.classes + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.cells[truth * self.classes + predicted] += 1;
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.cells[truth * self.classes..(truth + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// Recall of every class, `m[i][i] / sum_j m[i][j]`.
    pub fn recalls(&self) -> Result<Vec<f64>, MetricsError> {
        (0..self.classes)
            .map(|i| match self.row_sum(i) {
                0 => Err(MetricsError::EmptyClass(i)),
                n => Ok(self.get(i, i) as f64 / n as f64),
            })
            .collect()
    }
}

pub fn confusion_matrix(
    truth: &[usize],
    predicted: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    let mut m = ConfusionMatrix::zeros(classes);
    for (&t, &p) in truth.iter().zip(predicted) {
        if let Some(&label) = [t, p].iter().find(|&&l| l >= classes) {
            return Err(MetricsError::LabelOutOfRange { label, classes });
        }
        m.add(t, p);
    }
    Ok(m)
}

/// Weighted accuracy: the mean over classes of per-class recall.
///
/// ```
/// use imbalkit::metrics::{wacc, ConfusionMatrix};
/// let m = ConfusionMatrix::from_rows(&[vec![3, 1], vec![1, 1]]);
/// assert_eq!(wacc(&m).unwrap(), 0.625);
/// ```
pub fn wacc(m: &ConfusionMatrix) -> Result<f64, MetricsError> {
    if m.classes == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let recalls = m.recalls()?;
    Ok(recalls.iter().sum::<f64>() / m.classes as f64)
}

pub fn accuracy(m: &ConfusionMatrix) -> Result<f64, MetricsError> {
    match m.total() {
        0 => Err(MetricsError::EmptyMatrix),
        n => Ok(m.trace() as f64 / n as f64),
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

pub fn argmax_rows(scores: ArrayView2<'_, f64>) -> Vec<usize> {
    scores.outer_iter().map(|r| argmax(r.iter().copied())).collect()
}

/// Area under the ROC curve of `scores` for the samples flagged positive,
/// via the Mann-Whitney rank sum with average ranks for ties.
pub fn binary_auc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let n = scores.len();
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Unweighted mean over classes of the one-vs-rest AUC.
pub fn mean_auc_ovr(truth: &[usize], scores: ArrayView2<'_, f64>) -> Result<f64, MetricsError> {
    let (s, c) = scores.dim();
    if truth.len() != s {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            predicted: s,
        });
    }
    if c == 0 || s == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    if let Some(&label) = truth.iter().find(|&&t| t >= c) {
        return Err(MetricsError::LabelOutOfRange { label, classes: c });
    }
    let mut total = 0.0;
    for class in 0..c {
        let positive: Vec<bool> = truth.iter().map(|&t| t == class).collect();
        let column: Vec<f64> = scores.column(class).to_vec();
        total += binary_auc(&positive, &column).ok_or(MetricsError::DegenerateClass(class))?;
    }
    Ok(total / c as f64)
}

/// Metrics for one scored set, as written to `report.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub wacc: f64,
    pub accuracy: f64,
    /// `None` when some class is degenerate for one-vs-rest AUC.
    pub mean_auc: Option<f64>,
    pub recalls: Vec<f64>,
    /// Accuracy of each fold, when the scored samples carry fold labels.
    pub fold_accuracy: Vec<f64>,
}

impl Report {
    pub fn compute(truth: &[usize], scores: ArrayView2<'_, f64>) -> Result<Self, MetricsError> {
        let classes = scores.ncols();
        let predicted = argmax_rows(scores);
        let m = confusion_matrix(truth, &predicted, classes)?;
        let mean_auc = match mean_auc_ovr(truth, scores) {
            Ok(v) => Some(v),
            Err(MetricsError::DegenerateClass(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            wacc: wacc(&m)?,
            accuracy: accuracy(&m)?,
            mean_auc,
            recalls: m.recalls()?,
            fold_accuracy: Vec::new(),
        })
    }

    /// Adds per-fold accuracies; `folds[i]` is the fold of sample `i`.
    pub fn with_folds(
        mut self,
        truth: &[usize],
        scores: ArrayView2<'_, f64>,
        folds: &[usize],
    ) -> Result<Self, MetricsError> {
        let k = folds.iter().map(|f| f + 1).max().unwrap_or(0);
        let predicted = argmax_rows(scores);
        self.fold_accuracy = (0..k)
            .map(|fold| {
                let (mut hit, mut n) = (0usize, 0usize);
                for ((&t, &p), &f) in truth.iter().zip(&predicted).zip(folds) {
                    if f == fold {
                        n += 1;
                        hit += usize::from(t == p);
                    }
                }
                if n == 0 {
                    Err(MetricsError::EmptyMatrix)
                } else {
                    Ok(hit as f64 / n as f64)
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(self)
    }

    pub fn write<W: Write>(&self, output: W) -> Result<(), IngestError> {
        let mut wtr = csvio::writer(output);
        csvio::write_row(&mut wtr, ["metric", "value"])?;
        let fmt = |v: f64| csvio::format_sig9(v);
        csvio::write_row(&mut wtr, ["wacc".to_owned(), fmt(self.wacc)])?;
        csvio::write_row(&mut wtr, ["accuracy".to_owned(), fmt(self.accuracy)])?;
        let auc = self.mean_auc.map_or_else(|| "nan".to_owned(), fmt);
        csvio::write_row(&mut wtr, ["mean_auc".to_owned(), auc])?;
        for (i, r) in self.recalls.iter().enumerate() {
            csvio::write_row(&mut wtr, [format!("recall_{i}"), fmt(*r)])?;
        }
        for (f, a) in self.fold_accuracy.iter().enumerate() {
            csvio::write_row(&mut wtr, [format!("accuracy_fold_{f}"), fmt(*a)])?;
        }
        if !self.fold_accuracy.is_empty() {
            let mean = self.fold_accuracy.iter().sum::<f64>() / self.fold_accuracy.len() as f64;
            csvio::write_row(&mut wtr, ["mean_fold_accuracy".to_owned(), fmt(mean)])?;
        }
        csvio::finish(wtr)
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        csvio::write_atomic(path, |w| self.write(w))
    }
}
