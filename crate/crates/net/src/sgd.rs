use psp_core::linalg::Matrix;
use psp_core::{Bindable, PspError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch_size: 64,
            steps: 1000,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PspError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(PspError::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// `p <- p - lr * g`. Complex parameters move in both components.
pub fn sgd_step<T: Bindable>(params: &mut Matrix<T>, grads: &Matrix<T>, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(PspError::InvalidArgument("learning rate must be positive".into()));
    }
    params.axpy(T::from_real(-lr), grads)
}

/// [`sgd_step`] for a bias vector.
pub fn sgd_step_vec<T: Bindable>(params: &mut [T], grads: &[T], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(PspError::DimensionMismatch {
            op: "sgd_step",
            expected: params.len().to_string(),
            got: grads.len().to_string(),
        });
    }
    if !(lr > 0.0) {
        return Err(PspError::InvalidArgument("learning rate must be positive".into()));
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= g.scale(lr);
    }
    Ok(())
}
