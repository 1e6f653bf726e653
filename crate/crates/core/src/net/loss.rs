use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Row-wise softmax, computed in `f64`.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let classes = logits.shape().get(1).copied().unwrap_or(0);
    logits
        .data()
        .chunks_exact(classes.max(1))
        .map(|row| {
            let max = row
                .iter()
                .map(|v| v.to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect()
}

/// Mean cross-entropy of `logits` (`B × C`) against class indices, and its
/// gradient `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let b = labels.len();
    let (sum, grad) = cross_entropy_scaled(logits, labels, b)?;
    Ok((sum / b as f64, grad))
}

/// Summed cross-entropy and the gradient of `sum / denom`. Lets a large
/// batch be processed in chunks that share one normaliser.
pub fn cross_entropy_scaled<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    denom: usize,
) -> Result<(f64, Tensor<T>)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    if denom == 0 {
        return Err(Error::InvalidArgument(
            "loss normaliser must be >= 1".into(),
        ));
    }
    let classes = shape[1];
    let inv = 1.0 / denom as f64;
    let mut grad = Vec::with_capacity(logits.len());
    let mut sum = 0.0;
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let max = row
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
        let log_z = max + z.ln();
        sum += log_z - row[label].to_f64();
        for (c, v) in row.iter().enumerate() {
            let p = (v.to_f64() - log_z).exp();
            let onehot = if c == label { 1.0 } else { 0.0 };
            grad.push(T::from_f64((p - onehot) * inv));
        }
    }
    Ok((sum, Tensor::new(shape.to_vec(), grad)?))
}
