use super::{qr_orthonormalize, require_positive, Matrix, RealMatrix, SeededRng};
use crate::error::{mismatch, Result};

/// Haar-distributed `M x M` orthogonal matrix.
///
/// Gaussian matrix, QR, then columns of `Q` multiplied by the sign of
/// `diag(R)`; [`qr_orthonormalize`] already returns the factorization with a
/// positive diagonal, so that sign fix is built in.
pub fn sample_haar_orthogonal(m: usize, rng: &mut SeededRng) -> Result<RealMatrix> {
    require_positive(m)?;
    loop {
        let g = Matrix::from_fn(m, m, |_, _| rng.gaussian());
        // A Gaussian matrix is singular with probability zero; redraw if the
        // tolerance check trips anyway.
        if let Ok((q, _)) = qr_orthonormalize(&g) {
            return Ok(q);
        }
    }
}

/// Haar orthogonal matrix kept as a product of Householder reflections.
///
/// Householder QR of a Gaussian matrix leaves the trailing block Gaussian and
/// independent after every step, so the `k`-th reflector can be drawn directly
/// from a fresh Gaussian vector of length `M - k`. Sampling and applying cost
/// `O(M^2)` instead of the `O(M^3)` of [`sample_haar_orthogonal`], with the
/// same distribution. The Monte-Carlo suites use it for large `M`.
#[derive(Debug, Clone)]
pub struct HouseholderHaar {
    dim: usize,
    /// Unit reflector `k` acting on coordinates `k..M`, stored back to back.
    reflectors: Vec<f64>,
    signs: Vec<f64>,
}

impl HouseholderHaar {
    pub fn sample(m: usize, rng: &mut SeededRng) -> Result<Self> {
        require_positive(m)?;
        let mut reflectors = Vec::with_capacity(m * (m + 1) / 2);
        let mut signs = Vec::with_capacity(m);
        for k in 0..m {
            let len = m - k;
            let start = reflectors.len();
            reflectors.extend((0..len).map(|_| rng.gaussian()));
            let u = &mut reflectors[start..];
            let alpha = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let sign = if u[0] >= 0.0 { 1.0 } else { -1.0 };
            u[0] += sign * alpha;
            let unorm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if unorm > 0.0 {
                u.iter_mut().for_each(|x| *x /= unorm);
            } else {
                u.iter_mut().for_each(|x| *x = 0.0);
                u[0] = 1.0;
            }
            // R[k,k] = -sign * alpha; the Haar sign fix multiplies by its sign.
            signs.push(-sign);
        }
        Ok(Self {
            dim: m,
            reflectors,
            signs,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn offset(&self, k: usize) -> usize {
        // Σ_{i<k} (M - i)
        k * self.dim - k * (k.saturating_sub(1)) / 2
    }

    fn reflect(&self, k: usize, x: &mut [f64]) {
        let off = self.offset(k);
        let u = &self.reflectors[off..off + self.dim - k];
        let tail = &mut x[k..];
        let s: f64 = u.iter().zip(tail.iter()).map(|(a, b)| a * b).sum();
        let f = 2.0 * s;
        for (t, &ui) in tail.iter_mut().zip(u) {
            *t -= f * ui;
        }
    }

    /// `C x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(mismatch("HouseholderHaar::apply", self.dim, x.len()));
        }
        let mut y: Vec<f64> = x.iter().zip(&self.signs).map(|(a, s)| a * s).collect();
        for k in (0..self.dim).rev() {
            self.reflect(k, &mut y);
        }
        Ok(y)
    }

    /// `Cᵀ x`.
    pub fn apply_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(mismatch("HouseholderHaar::apply_transpose", self.dim, x.len()));
        }
        let mut y = x.to_vec();
        for k in 0..self.dim {
            self.reflect(k, &mut y);
        }
        y.iter_mut().zip(&self.signs).for_each(|(a, s)| *a *= s);
        Ok(y)
    }

    /// Dense `C`.
    pub fn materialize(&self) -> RealMatrix {
        let mut c = RealMatrix::zeros(self.dim, self.dim);
        let mut e = vec![0.0; self.dim];
        for j in 0..self.dim {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.apply(&e).expect("dimension checked");
            for (i, v) in col.into_iter().enumerate() {
                c.set(i, j, v);
            }
        }
        c
    }
}
