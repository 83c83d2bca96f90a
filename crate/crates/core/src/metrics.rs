//! Frame-level precision, recall, F1 and accuracy per AU.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities at or above this count as positive.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AuMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_au: Vec<AuMetrics>,
    /// Unweighted mean over AUs.
    pub avg: AuMetrics,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn binarize<T: Scalar>(probs: &Tensor<T>) -> Tensor<T> {
    let th = T::lit(THRESHOLD);
    probs.map(|p| if p >= th { T::one() } else { T::zero() })
}

/// Metrics of binary n×m predictions against binary truth. Every 0/0 ratio
/// is 0.
pub fn f1_accuracy<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<MetricsReport> {
    let (n, m) = truth.as_matrix()?;
    if pred.shape() != truth.shape() {
        return Err(Error::shape(format!(
            "predictions {:?} and truth {:?} differ in shape",
            pred.shape(),
            truth.shape()
        )));
    }
    let binary = |t: &Tensor<T>| t.data().iter().all(|&v| v == T::zero() || v == T::one());
    if !binary(pred) || !binary(truth) {
        return Err(Error::Domain("metrics need binary predictions and truth".into()));
    }
    let (p, t) = (pred.data(), truth.data());
    let per_au: Vec<AuMetrics> = (0..m)
        .map(|j| {
            let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
            for i in 0..n {
                match (p[i * m + j] == T::one(), t[i * m + j] == T::one()) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => tn += 1,
                }
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fneg);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            AuMetrics {
                precision,
                recall,
                f1,
                accuracy: ratio(tp + tn, n),
            }
        })
        .collect();
    let mean = |f: fn(&AuMetrics) -> f64| per_au.iter().map(f).sum::<f64>() / m as f64;
    let avg = AuMetrics {
        precision: mean(|a| a.precision),
        recall: mean(|a| a.recall),
        f1: mean(|a| a.f1),
        accuracy: mean(|a| a.accuracy),
    };
    Ok(MetricsReport { per_au, avg })
}

/// Thresholds `probs` and scores them.
pub fn evaluate_probs<T: Scalar>(probs: &Tensor<T>, truth: &Tensor<T>) -> Result<MetricsReport> {
    f1_accuracy(&binarize(probs), truth)
}

impl MetricsReport {
    /// CSV with header `au,precision,recall,f1,accuracy`, one row per AU
    /// (1-based) and a final `Avg` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("au,precision,recall,f1,accuracy\n");
        let row = |s: &mut String, name: &str, a: &AuMetrics| {
            s.push_str(&format!("{name},{},{},{},{}\n", a.precision, a.recall, a.f1, a.accuracy));
        };
        for (j, a) in self.per_au.iter().enumerate() {
            row(&mut s, &(j + 1).to_string(), a);
        }
        row(&mut s, "Avg", &self.avg);
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}
