use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Mean softmax cross-entropy over rows, with the logit gradient `(softmax − onehot) / batch`.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::dims("softmax_xent", logits.shape(), (labels.len(), 1)));
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let batch = logits.rows();
    if batch == 0 {
        return Ok((0.0, Matrix::zeros(0, classes)));
    }
    let inv = 1.0 / batch as f64;
    let mut grad = Matrix::zeros(batch, classes);
    let mut total = 0.0;
    for (i, row) in logits.row_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[labels[i]];
        let g = grad.row_mut(i);
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - log_z).exp() * inv;
        }
        g[labels[i]] -= inv;
    }
    Ok((total * inv, grad))
}

/// Squared error summed over columns and averaged over rows.
///
/// Returns the loss and the gradients with respect to `a` and `b`.
pub fn squared_error(a: &Matrix, b: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if a.shape() != b.shape() {
        return Err(Error::dims("squared_error", a.shape(), b.shape()));
    }
    let batch = a.rows();
    if batch == 0 {
        return Ok((0.0, a.clone(), b.clone()));
    }
    let inv = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad_a = Matrix::zeros(a.rows(), a.cols());
    for ((g, &x), &y) in grad_a
        .as_mut_slice()
        .iter_mut()
        .zip(a.as_slice())
        .zip(b.as_slice())
    {
        let d = x - y;
        loss += d * d;
        *g = 2.0 * d * inv;
    }
    let grad_b = grad_a.scale(-1.0);
    Ok((loss * inv, grad_a, grad_b))
}
