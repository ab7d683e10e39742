//! Dense real and complex linear algebra.
//!
//! Everything is row-major `f64` (or `Complex64`, stored as contiguous
//! `(re, im)` pairs). Products go through `matrixmultiply`; the naive loops
//! kept in the tests are the reference they are checked against.

mod haar;
mod qr;
mod rng;

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, PspError, Result};

pub use haar::{sample_haar_orthogonal, HouseholderHaar};
pub use qr::{determinant, qr_orthonormalize};
pub use rng::SeededRng;

/// Field element the matrices are generic over: `f64` or `Complex64`.
pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Serialize
    + DeserializeOwned
{
    const ZERO: Self;
    const ONE: Self;
    /// Number of real components (1 or 2).
    const COMPONENTS: usize;

    fn from_real(v: f64) -> Self;
    fn conj(self) -> Self;
    fn re(self) -> f64;
    fn im(self) -> f64;
    fn scale(self, s: f64) -> Self;
    fn norm_sqr(self) -> f64;
    fn modulus(self) -> f64;
    fn is_finite(self) -> bool;

    /// Real component `i` (0 = real part, 1 = imaginary part).
    fn component(self, i: usize) -> f64;
    fn with_component(self, i: usize, v: f64) -> Self;

    /// ReLU applied to each real component independently.
    fn split_relu(self) -> Self;
    /// Back-propagates `grad` through [`Scalar::split_relu`] at `pre`.
    fn split_relu_backward(pre: Self, grad: Self) -> Self;

    /// `C <- alpha * A * B + beta * C` on strided storage.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const COMPONENTS: usize = 1;

    fn from_real(v: f64) -> Self {
        v
    }
    fn conj(self) -> Self {
        self
    }
    fn re(self) -> f64 {
        self
    }
    fn im(self) -> f64 {
        0.0
    }
    fn scale(self, s: f64) -> Self {
        self * s
    }
    fn norm_sqr(self) -> f64 {
        self * self
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn component(self, i: usize) -> f64 {
        debug_assert_eq!(i, 0);
        self
    }
    fn with_component(self, i: usize, v: f64) -> Self {
        debug_assert_eq!(i, 0);
        v
    }
    fn split_relu(self) -> Self {
        self.max(0.0)
    }
    fn split_relu_backward(pre: Self, grad: Self) -> Self {
        if pre > 0.0 {
            grad
        } else {
            0.0
        }
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for Complex64 {
    const ZERO: Self = Complex64::new(0.0, 0.0);
    const ONE: Self = Complex64::new(1.0, 0.0);
    const COMPONENTS: usize = 2;

    fn from_real(v: f64) -> Self {
        Complex64::new(v, 0.0)
    }
    fn conj(self) -> Self {
        Complex64::conj(&self)
    }
    fn re(self) -> f64 {
        self.re
    }
    fn im(self) -> f64 {
        self.im
    }
    fn scale(self, s: f64) -> Self {
        Complex64::new(self.re * s, self.im * s)
    }
    fn norm_sqr(self) -> f64 {
        Complex64::norm_sqr(&self)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
    fn component(self, i: usize) -> f64 {
        if i == 0 {
            self.re
        } else {
            self.im
        }
    }
    fn with_component(mut self, i: usize, v: f64) -> Self {
        if i == 0 {
            self.re = v;
        } else {
            self.im = v;
        }
        self
    }
    fn split_relu(self) -> Self {
        Complex64::new(self.re.max(0.0), self.im.max(0.0))
    }
    fn split_relu_backward(pre: Self, grad: Self) -> Self {
        Complex64::new(
            if pre.re > 0.0 { grad.re } else { 0.0 },
            if pre.im > 0.0 { grad.im } else { 0.0 },
        )
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        use matrixmultiply::{zgemm, CGemmOption};
        // Complex64 is repr(C) { re, im }, the same layout as [f64; 2].
        zgemm(
            CGemmOption::Standard,
            CGemmOption::Standard,
            m,
            k,
            n,
            [alpha.re, alpha.im],
            a as *const [f64; 2],
            rsa,
            csa,
            b as *const [f64; 2],
            rsb,
            csb,
            [beta.re, beta.im],
            c as *mut [f64; 2],
            rsc,
            csc,
        );
    }
}

/// How an operand enters a product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// As stored.
    N,
    /// Transposed.
    T,
    /// Conjugate-transposed (same as `T` for real scalars).
    H,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type RealMatrix = Matrix<f64>;
pub type ComplexMatrix = Matrix<Complex64>;

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::ONE;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(mismatch("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(entries: &[T]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in entries.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn conj_transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i).conj())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| v.scale(s))
    }

    /// `self <- self + alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(mismatch("axpy", fmt_shape(self.shape()), fmt_shape(other.shape())));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.modulus()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).modulus()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Multiplies column `j` by `factors[j]`, i.e. `self * diag(factors)`.
    pub fn scale_columns(&mut self, factors: &[T]) -> Result<()> {
        if factors.len() != self.cols {
            return Err(mismatch("scale_columns", self.cols, factors.len()));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, &f) in row.iter_mut().zip(factors) {
                *v *= f;
            }
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(T::ONE, self, Op::N, other, Op::N, T::ZERO, &mut out)?;
        Ok(out)
    }

    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        matvec(self, x)
    }
}

impl RealMatrix {
    pub fn to_complex(&self) -> ComplexMatrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }
}

impl ComplexMatrix {
    pub fn real_part(&self) -> RealMatrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.re).collect(),
        }
    }
}

fn fmt_shape((r, c): (usize, usize)) -> String {
    format!("{r}x{c}")
}

fn op_shape<T>(m: &Matrix<T>, op: Op) -> (usize, usize) {
    match op {
        Op::N => (m.rows, m.cols),
        Op::T | Op::H => (m.cols, m.rows),
    }
}

fn op_strides<T>(m: &Matrix<T>, op: Op) -> (isize, isize) {
    let (rs, cs) = (m.cols as isize, 1isize);
    match op {
        Op::N => (rs, cs),
        Op::T | Op::H => (cs, rs),
    }
}

/// `c <- alpha * op(a) * op(b) + beta * c`.
pub fn gemm<T: Scalar>(
    alpha: T,
    a: &Matrix<T>,
    op_a: Op,
    b: &Matrix<T>,
    op_b: Op,
    beta: T,
    c: &mut Matrix<T>,
) -> Result<()> {
    let (m, k) = op_shape(a, op_a);
    let (k2, n) = op_shape(b, op_b);
    if k != k2 {
        return Err(mismatch("gemm inner dimension", k, k2));
    }
    if c.shape() != (m, n) {
        return Err(mismatch("gemm output", fmt_shape((m, n)), fmt_shape(c.shape())));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        for v in c.data.iter_mut() {
            *v = beta * *v;
        }
        return Ok(());
    }
    // Conjugation is materialized; only complex `H` operands pay for it.
    let a_conj;
    let a_ref = if op_a == Op::H && T::COMPONENTS == 2 {
        a_conj = a.map(|v| v.conj());
        &a_conj
    } else {
        a
    };
    let b_conj;
    let b_ref = if op_b == Op::H && T::COMPONENTS == 2 {
        b_conj = b.map(|v| v.conj());
        &b_conj
    } else {
        b
    };
    let (rsa, csa) = op_strides(a_ref, op_a);
    let (rsb, csb) = op_strides(b_ref, op_b);
    // SAFETY: shapes and strides were checked above and `c` is a distinct
    // mutable borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a_ref.data.as_ptr(),
            rsa,
            csa,
            b_ref.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

/// `y = A x`.
pub fn matvec<T: Scalar>(a: &Matrix<T>, x: &[T]) -> Result<Vec<T>> {
    if a.cols != x.len() {
        return Err(mismatch("matvec", a.cols, x.len()));
    }
    Ok((0..a.rows)
        .map(|i| {
            a.row(i)
                .iter()
                .zip(x)
                .fold(T::ZERO, |acc, (&aij, &xj)| acc + aij * xj)
        })
        .collect())
}

/// Element-wise product `a ⊙ b`.
pub fn hadamard<T: Scalar>(a: &[T], b: &[T]) -> Result<Vec<T>> {
    if a.len() != b.len() {
        return Err(mismatch("hadamard", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x * y).collect())
}

/// Bilinear sum `Σ a_i b_i` (no conjugation).
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::ZERO, |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Scalar>(x: &[T]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub fn lift(x: &[f64]) -> Vec<Complex64> {
    x.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

pub(crate) fn require_positive(m: usize) -> Result<()> {
    if m == 0 {
        Err(PspError::ZeroDimension)
    } else {
        Ok(())
    }
}
