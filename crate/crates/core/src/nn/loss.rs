use super::tensor::{Scalar, Tensor};
use super::NnError;

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub probs: Tensor<T>,
    /// Gradient of the mean loss with respect to the logits.
    pub grad: Tensor<T>,
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.sample_len();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::from_vec(logits.shape(), out)
}

pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossOutput<T>, NnError> {
    let n = logits.batch();
    let k = logits.sample_len();
    if labels.len() != n || logits.shape().len() != 2 {
        return Err(NnError::ShapeMismatch(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::ShapeMismatch(format!("label {bad} >= {k} classes")));
    }
    let probs = softmax(logits);
    let mut loss = 0.0;
    let inv_n = T::of_f64(1.0 / n as f64);
    let mut grad = probs.data().to_vec();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[label].as_f64();
        grad[i * k + label] -= T::one();
        for g in &mut grad[i * k..(i + 1) * k] {
            *g *= inv_n;
        }
    }
    Ok(LossOutput {
        loss: loss / n as f64,
        probs,
        grad: Tensor::from_vec(logits.shape(), grad),
    })
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
