use super::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits. Logits are `(N, K, 1, 1)`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>) {
    let n = logits.batch();
    let k = logits.sample_len();
    assert_eq!(labels.len(), n, "one label per sample");
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, (&label, row)) in labels.iter().zip(logits.data().chunks(k)).enumerate() {
        assert!(label < k, "label {label} out of range for {k} classes");
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|&v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += sum.ln() + max - row[label].as_f64();
        for (j, e) in exps.iter().enumerate() {
            let p = e / sum;
            let target = if j == label { 1.0 } else { 0.0 };
            grad.data_mut()[i * k + j] = T::from_f64((p - target) * inv_n);
        }
    }
    (total * inv_n, grad)
}

/// Index of the largest logit per sample.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.sample_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let t = Tensor::<f64>::zeros([3, 5, 1, 1]);
        let (loss, _) = cross_entropy(&t, &[0, 1, 4]);
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_is_near_zero() {
        let t = Tensor::from_vec([1, 3, 1, 1], vec![50.0f64, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&t, &[0]).0 < 1e-20);
    }

    #[test]
    fn matches_log_softmax_by_hand() {
        let t = Tensor::from_vec([1, 3, 1, 1], vec![1.0f64, 2.0, 3.0]).unwrap();
        let (loss, grad) = cross_entropy(&t, &[1]);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        assert!((loss - (z.ln() - 2.0)).abs() < 1e-12);
        assert!((grad.data()[0] - 1f64.exp() / z).abs() < 1e-12);
        assert!((grad.data()[1] - (2f64.exp() / z - 1.0)).abs() < 1e-12);
    }
}
