use serde::{Deserialize, Serialize};

use crate::error::{LdgdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    /// Classes whose precision or recall had a zero denominator (scored 0).
    pub undefined_classes: Vec<usize>,
}

/// Accuracy and macro-averaged precision, recall and F1 over `k` classes.
pub fn metrics(predicted: &[usize], truth: &[usize], k: usize) -> Result<MetricsReport> {
    if predicted.len() != truth.len() {
        return Err(LdgdError::InvalidArgument(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.iter().chain(truth).any(|&l| l >= k) {
        return Err(LdgdError::InvalidArgument(format!("labels must be below {k}")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let n = truth.len();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let mut undefined = Vec::new();
    let (mut prec, mut rec, mut f1) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let predicted_c: usize = (0..k).map(|t| confusion[t][c]).sum();
        let actual_c: usize = confusion[c].iter().sum();
        if predicted_c == 0 || actual_c == 0 {
            undefined.push(c);
        }
        prec[c] = if predicted_c > 0 { tp / predicted_c as f64 } else { 0.0 };
        rec[c] = if actual_c > 0 { tp / actual_c as f64 } else { 0.0 };
        f1[c] = if prec[c] + rec[c] > 0.0 {
            2.0 * prec[c] * rec[c] / (prec[c] + rec[c])
        } else {
            0.0
        };
    }
    let mean = |v: &[f64]| if k > 0 { v.iter().sum::<f64>() / k as f64 } else { 0.0 };
    Ok(MetricsReport {
        accuracy: if n > 0 { correct as f64 / n as f64 } else { 0.0 },
        precision: mean(&prec),
        recall: mean(&rec),
        f1: mean(&f1),
        confusion,
        per_class_precision: prec,
        per_class_recall: rec,
        per_class_f1: f1,
        undefined_classes: undefined,
    })
}
