//! Classification losses.

use crate::error::{Error, Result};
use crate::tags::MultiHotVector;

/// Clamp floor for log arguments.
pub const LOG_EPSILON: f64 = 1e-12;

/// Categorical cross-entropy between a probability vector and a one-hot
/// label: `-log(pred[true class])`, epsilon-clamped.
pub fn cross_entropy(pred: &[f64], one_hot: &[f64]) -> Result<f64> {
    if pred.len() != one_hot.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction length {} vs label length {}",
            pred.len(),
            one_hot.len()
        )));
    }
    let mut true_class = None;
    for (i, &y) in one_hot.iter().enumerate() {
        if y == 1.0 {
            if true_class.is_some() {
                return Err(Error::InvalidLabel("one-hot vector has multiple ones".into()));
            }
            true_class = Some(i);
        } else if y != 0.0 {
            return Err(Error::InvalidLabel(format!("one-hot entry {y} is not 0 or 1")));
        }
    }
    let true_class =
        true_class.ok_or_else(|| Error::InvalidLabel("one-hot vector has no one".into()))?;
    let sum: f64 = pred.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidLabel(format!("prediction sums to {sum}, not 1")));
    }
    Ok(-pred[true_class].max(LOG_EPSILON).ln())
}

/// Cross-entropy against a class index (the one-hot is implicit).
pub fn cross_entropy_for_class(pred: &[f64], class_index: usize) -> Result<f64> {
    if class_index >= pred.len() {
        return Err(Error::ClassIndexOutOfRange { index: class_index, classes: pred.len() });
    }
    Ok(-pred[class_index].max(LOG_EPSILON).ln())
}

/// Binary cross-entropy averaged over all labels, treating each label
/// independently.
pub fn binary_cross_entropy(pred: &[f64], labels: &MultiHotVector) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction length {} vs label length {}",
            pred.len(),
            labels.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("binary cross-entropy of empty vectors".into()));
    }
    let mut total = 0.0;
    for (&p, &y) in pred.iter().zip(labels.bits()) {
        let p = p.clamp(LOG_EPSILON, 1.0 - LOG_EPSILON);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / pred.len() as f64)
}
