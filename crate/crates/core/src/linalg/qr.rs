use super::RealMatrix;
use crate::error::{mismatch, PspError, Result};

/// Householder QR of a square matrix, normalized so that `diag(R) > 0`.
///
/// With the positive-diagonal normalization the factorization is unique, which
/// is what makes `Q` Haar-distributed when `A` is Gaussian. Rejects inputs
/// whose `|R[k,k]|` falls below `1e-10` times the largest column norm of `A`.
pub fn qr_orthonormalize(a: &RealMatrix) -> Result<(RealMatrix, RealMatrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(mismatch("qr_orthonormalize (square)", n, a.cols()));
    }
    if n == 0 {
        return Err(PspError::ZeroDimension);
    }
    let scale = (0..n)
        .map(|j| (0..n).map(|i| a.get(i, j).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let tol = 1e-10 * scale;

    // Column j of R is row j of `rt`, so the reflections walk contiguous memory.
    let mut rt = a.transpose();
    let mut q = RealMatrix::identity(n);
    let mut v = vec![0.0; n];
    for k in 0..n {
        let col = &rt.row(k)[k..];
        let alpha = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if alpha <= tol {
            return Err(PspError::RankDeficient { index: k, value: alpha });
        }
        let x0 = col[0];
        if alpha == x0.abs() {
            // Nothing below the diagonal; the sign pass below fixes R[k,k].
            rt.row_mut(k)[k + 1..].iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        let sign = if x0 >= 0.0 { 1.0 } else { -1.0 };
        v[k..].copy_from_slice(col);
        v[k] += sign * alpha;
        let vk = &v[k..];
        let beta = 2.0 / vk.iter().map(|x| x * x).sum::<f64>();

        // R[k.., k..] <- H R[k.., k..]
        for j in k..n {
            let c = &mut rt.row_mut(j)[k..];
            let f = beta * c.iter().zip(vk).map(|(a, b)| a * b).sum::<f64>();
            c.iter_mut().zip(vk).for_each(|(a, b)| *a -= f * b);
        }
        // Q[.., k..] <- Q[.., k..] H
        for i in 0..n {
            let r = &mut q.row_mut(i)[k..];
            let f = beta * r.iter().zip(vk).map(|(a, b)| a * b).sum::<f64>();
            r.iter_mut().zip(vk).for_each(|(a, b)| *a -= f * b);
        }
        rt.row_mut(k)[k + 1..].iter_mut().for_each(|x| *x = 0.0);
    }
    let mut r = rt.transpose();
    for k in 0..n {
        if r.get(k, k) < 0.0 {
            for j in k..n {
                r.set(k, j, -r.get(k, j));
            }
            for i in 0..n {
                q.set(i, k, -q.get(i, k));
            }
        }
    }
    Ok((q, r))
}

/// Determinant by LU with partial pivoting.
pub fn determinant(a: &RealMatrix) -> Result<f64> {
    let n = a.rows();
    if a.cols() != n {
        return Err(mismatch("determinant (square)", n, a.cols()));
    }
    let mut lu = a.clone();
    let mut det = 1.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| lu.get(i, k).abs().total_cmp(&lu.get(j, k).abs()))
            .unwrap_or(k);
        let pivot = lu.get(p, k);
        if pivot == 0.0 {
            return Ok(0.0);
        }
        if p != k {
            for j in 0..n {
                let t = lu.get(k, j);
                lu.set(k, j, lu.get(p, j));
                lu.set(p, j, t);
            }
            det = -det;
        }
        det *= pivot;
        for i in (k + 1)..n {
            let f = lu.get(i, k) / pivot;
            for j in (k + 1)..n {
                let val = lu.get(i, j) - f * lu.get(k, j);
                lu.set(i, j, val);
            }
        }
    }
    Ok(det)
}
