use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − onehot) / batch` with respect to the logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, classes) = match logits.shape() {
        &[n, c] => (n, c),
        s => return Err(Error::Shape(format!("logits must be [batch, classes], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!("label {bad} outside [0, {classes})")));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut grad = vec![T::zero(); n * classes];
    let mut loss = T::zero();
    for (i, (row, &y)) in logits.data().chunks(classes).zip(labels).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let denom: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_denom = denom.ln();
        loss += log_denom - (row[y] - max);
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - max).exp() / denom * inv_n;
        }
        g[y] -= inv_n;
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::Numeric("cross-entropy is not finite".into()));
    }
    Ok((loss, Tensor::from_vec(&[n, classes], grad)?))
}
