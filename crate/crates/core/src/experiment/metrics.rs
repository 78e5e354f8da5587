use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<u64>>,
    pub loss_curve: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsReport {
    /// Metrics derived from a confusion matrix alone.
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let n = confusion.len();
        if n == 0 || confusion.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
        }
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..n).map(|k| confusion[k][k]).sum();
        let per_class: Vec<ClassMetrics> = (0..n)
            .map(|k| {
                let tp = confusion[k][k] as f64;
                let support: u64 = confusion[k].iter().sum();
                let predicted: u64 = confusion.iter().map(|r| r[k]).sum();
                let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
                let recall = if support > 0 { tp / support as f64 } else { 0.0 };
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
        let accuracy = if total > 0 { correct as f64 / total as f64 } else { 0.0 };
        let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / n as f64;
        Ok(Self {
            accuracy,
            macro_f1,
            per_class,
            confusion,
            loss_curve: Vec::new(),
            seed: 0,
            config_hash: String::new(),
        })
    }

    pub fn from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= classes || t >= classes {
                return Err(Error::InvalidArgument(format!("class id outside 0..{classes}")));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        let r = MetricsReport::from_predictions(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-15);

        let truth: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let r = MetricsReport::from_predictions(&[0; 8], &truth, 4).unwrap();
        assert_eq!(r.accuracy, 0.25);
        assert!((r.macro_f1 - 0.1).abs() < 1e-15);
    }
}
