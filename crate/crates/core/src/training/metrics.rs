use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Classification metrics with macro averages. `confusion[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Precision of a class that was never predicted is 0, as is recall of
    /// a class with no support, and F1 when both are 0.
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let n = confusion.len();
        assert!(confusion.iter().all(|r| r.len() == n), "confusion matrix must be square");
        let total: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..n).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..n)
            .map(|c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|r| r[c]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_class.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            accuracy: ratio(trace, total),
            macro_precision: mean(|c| c.precision),
            macro_recall: mean(|c| c.recall),
            macro_f1: mean(|c| c.f1),
            per_class,
            confusion,
        }
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize], classes: usize) -> Self {
        assert_eq!(labels.len(), predictions.len());
        let mut confusion = vec![vec![0; classes]; classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            confusion[y][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Plain-text table with one row per model.
pub fn metrics_table(rows: &[(&str, &MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>9}  {:>8}\n",
        "Model", "Accuracy", "F1", "Precision", "Recall"
    );
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>9.4}  {:>8.4}",
            name, m.accuracy, m.macro_f1, m.macro_precision, m.macro_recall
        );
    }
    out
}
