//! F1 scores for single-label multiclass predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

/// Per-class F1 for every entry of `classes`. A class with no true
/// positives scores 0, including a class absent from both sequences.
pub fn per_class_f1<T: PartialEq>(predictions: &[T], truth: &[T], classes: &[T]) -> Result<Vec<f64>> {
    check_lengths(predictions, truth)?;
    Ok(classes
        .iter()
        .map(|c| {
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut fn_ = 0usize;
            for (p, t) in predictions.iter().zip(truth) {
                match (p == c, t == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            if tp == 0 {
                0.0
            } else {
                let precision = tp as f64 / (tp + fp) as f64;
                let recall = tp as f64 / (tp + fn_) as f64;
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect())
}

/// F1 combined over `classes`. Micro-averaging over single-label data
/// reduces to accuracy.
pub fn f1_score<T: PartialEq>(predictions: &[T], truth: &[T], classes: &[T], averaging: Averaging) -> Result<f64> {
    check_lengths(predictions, truth)?;
    match averaging {
        Averaging::Macro => {
            if classes.is_empty() {
                return Err(Error::invalid("macro F1 needs at least one class"));
            }
            let per = per_class_f1(predictions, truth, classes)?;
            Ok(per.iter().sum::<f64>() / per.len() as f64)
        }
        Averaging::Micro => {
            // Pooled counts over all classes: tp = correct, fp = fn = wrong.
            let correct = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
            Ok(correct as f64 / truth.len() as f64)
        }
    }
}

fn check_lengths<T>(predictions: &[T], truth: &[T]) -> Result<()> {
    if predictions.is_empty() || truth.is_empty() {
        return Err(Error::invalid("F1 of an empty label sequence"));
    }
    if predictions.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth labels",
            predictions.len(),
            truth.len()
        )));
    }
    Ok(())
}
