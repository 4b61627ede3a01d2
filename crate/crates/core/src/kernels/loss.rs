use alloc::vec;

use crate::error::{shape_err, Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Mean cross-entropy of `softmax(logits)` at the label indices.
/// Also returns the softmax probabilities, which the gradient reuses.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, c) = match logits.shape() {
        &[n, c] => (n, c),
        s => return Err(shape_err!("logits must be [N, C], got {:?}", s)),
    };
    if labels.len() != n {
        return Err(shape_err!("{} labels for {} rows", labels.len(), n));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label { label, classes: c });
    }
    let mut probs = vec![T::zero(); n * c];
    let mut total = T::zero();
    for ((row, p), &label) in logits.data().chunks_exact(c).zip(probs.chunks_exact_mut(c)).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (pi, &v) in p.iter_mut().zip(row) {
            *pi = (v - max).exp();
            z += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= z;
        }
        total += z.ln() + max - row[label];
    }
    let loss = total / cast::<T>(n as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    Ok((loss, Tensor::new(&[n, c], probs)?))
}

/// `(softmax − one_hot) / N`, scaled by the upstream scalar gradient.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize], upstream: T) -> Tensor<T> {
    let c = probs.shape()[1];
    let scale = upstream / cast::<T>(labels.len() as f64);
    let mut g = probs.clone();
    for (row, &label) in g.data_mut().chunks_exact_mut(c).zip(labels) {
        row[label] -= T::one();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::<f64>::zeros(&[3, 10]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn saturated_margin() {
        let mut logits = Tensor::<f32>::zeros(&[1, 4]).unwrap();
        logits.set(&[0, 2], 1000.0);
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss.abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let logits = random_tensor(&[3, 5], 4);
        let labels = [1, 0, 4];
        let (_, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
        let g = softmax_cross_entropy_backward(&probs, &labels, 1.0);
        let h = 1e-6;
        for k in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[k] += h;
            let mut minus = logits.clone();
            minus.data_mut()[k] -= h;
            let fd = (softmax_cross_entropy(&plus, &labels).unwrap().0 - softmax_cross_entropy(&minus, &labels).unwrap().0) / (2.0 * h);
            let a = g.data()[k];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-12) <= 1e-6, "{} vs {}", a, fd);
        }
    }

    #[test]
    fn out_of_range_label() {
        let logits = Tensor::<f64>::zeros(&[1, 3]).unwrap();
        assert_eq!(softmax_cross_entropy(&logits, &[3]).unwrap_err(), Error::Label { label: 3, classes: 3 });
    }
}
