use psp_core::linalg::{Matrix, RealMatrix};
use psp_core::{Bindable, PspError, Result};

/// Real parts of the logits. Real networks read out unchanged.
pub fn complex_readout<T: Bindable>(z: &Matrix<T>) -> RealMatrix {
    Matrix::from_fn(z.rows(), z.cols(), |i, j| z.get(i, j).re())
}

/// Gradient of the read-out pulled back to the logits: only real components
/// receive gradient.
pub fn complex_readout_backward<T: Bindable>(grad: &RealMatrix) -> Matrix<T> {
    Matrix::from_fn(grad.rows(), grad.cols(), |i, j| T::from_real(grad.get(i, j)))
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn softmax_cross_entropy(logits: &RealMatrix, labels: &[usize]) -> Result<(f64, RealMatrix)> {
    if labels.len() != logits.rows() {
        return Err(PspError::DimensionMismatch {
            op: "softmax_cross_entropy",
            expected: logits.rows().to_string(),
            got: labels.len().to_string(),
        });
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(PspError::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let batch = logits.rows() as f64;
    let mut grad = RealMatrix::zeros(logits.rows(), classes);
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.row(b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = grad.row_mut(b);
        for (c, v) in row.iter().enumerate() {
            g[c] = (v - log_z).exp() / batch;
        }
        g[label] -= 1.0 / batch;
    }
    Ok((loss / batch, grad))
}

/// `0.5 * mean_b |y_b - t_b|^2` and its gradient.
pub fn mean_squared_error<T: Bindable>(y: &Matrix<T>, target: &Matrix<T>) -> Result<(f64, Matrix<T>)> {
    if y.shape() != target.shape() {
        return Err(PspError::DimensionMismatch {
            op: "mean_squared_error",
            expected: format!("{:?}", target.shape()),
            got: format!("{:?}", y.shape()),
        });
    }
    let batch = y.rows() as f64;
    let mut grad = y.clone();
    grad.axpy(-T::ONE, target)?;
    let loss = 0.5 * grad.data().iter().map(|v| v.norm_sqr()).sum::<f64>() / batch;
    Ok((loss, grad.scaled(1.0 / batch)))
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: &RealMatrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|b| {
            logits
                .row(b)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
