//! Softmax and the fused softmax cross-entropy loss.

use super::ShapeError;
use crate::tensor::Tensor;

/// Row-wise softmax of a (batch, classes) tensor, stabilized by subtracting
/// each row's maximum before exponentiation.
pub fn softmax(logits: &Tensor) -> Result<Tensor, ShapeError> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(ShapeError::TensorMismatch {
            expected: vec![0, 0],
            got: shape.to_vec(),
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    let mut out = logits.clone();
    let data = out.data_mut();
    for b in 0..batch {
        let row = &mut data[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
///
/// loss = mean_b( -log softmax(logits_b)[label_b] ),
/// grad  = (softmax(logits) - onehot(labels)) / batch.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor), ShapeError> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(ShapeError::TensorMismatch {
            expected: vec![labels.len(), 0],
            got: shape.to_vec(),
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    for &label in labels {
        if label >= classes {
            return Err(ShapeError::LabelOutOfRange { label, classes });
        }
    }

    let mut grad = softmax(logits)?;
    let mut loss = 0.0;
    let inv_batch = 1.0 / batch as f64;
    let gdata = grad.data_mut();
    for (b, &label) in labels.iter().enumerate() {
        let row = &mut gdata[b * classes..(b + 1) * classes];
        // p is clamped away from zero only through the max-subtraction; a true
        // zero cannot occur because the label term always exponentiates to > 0.
        loss -= row[label].ln();
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_batch;
        }
    }
    Ok((loss * inv_batch, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let logits = Tensor::filled(&[1, 9], 3.7);
        let p = softmax(&logits).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
        let (loss, _) = softmax_cross_entropy(&logits, &[4]).unwrap();
        assert!((loss - (9.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let logits = Tensor::from_vec(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.is_finite());
        assert!(loss < 1e-6);
        assert!(grad.is_all_finite());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let logits =
            Tensor::from_vec(&[2, 3], vec![0.1, -4.0, 2.5, 100.0, -100.0, 0.0]).unwrap();
        let p = softmax(&logits).unwrap();
        for b in 0..2 {
            let sum: f64 = p.data()[b * 3..(b + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(ShapeError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn gradient_sums_to_zero_per_row() {
        let logits = Tensor::from_vec(&[1, 4], vec![0.2, -1.0, 0.7, 3.0]).unwrap();
        let (_, grad) = softmax_cross_entropy(&logits, &[2]).unwrap();
        let sum: f64 = grad.data().iter().sum();
        assert!(sum.abs() < 1e-12);
    }
}
