//! Dense and convolutional layers whose linear map is superposed.
//!
//! A dense layer binds its input: `y = g(W (C_k x) + b)`. A convolutional
//! layer binds its kernel: `y_n = g((w_n ⊙ c_k) * x + b_n)`, with the context
//! acting on the flattened `in_channels x kh x kw` kernel. Biases are never
//! bound.
//!
//! Batches are row-major `B x features` matrices. Complex layers use the
//! conjugate-cogradient convention: the gradient of a real loss with respect
//! to a complex parameter `z` is stored as `∂L/∂Re z + i ∂L/∂Im z`, so a plain
//! `z -= lr * g` step descends on both components.

use psp_core::context::{Bindable, ContextKey, ContextRegistry, Family};
use psp_core::linalg::{gemm, Matrix, Op, SeededRng};
use psp_core::{PspError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    /// ReLU on each real component (split ReLU for complex layers).
    Relu,
}

impl Activation {
    fn forward<T: Bindable>(self, pre: &Matrix<T>) -> Matrix<T> {
        match self {
            Activation::Identity => pre.clone(),
            Activation::Relu => pre.map(T::split_relu),
        }
    }

    fn backward<T: Bindable>(self, pre: &Matrix<T>, grad: &Matrix<T>) -> Matrix<T> {
        match self {
            Activation::Identity => grad.clone(),
            Activation::Relu => {
                let mut out = grad.clone();
                for (g, &p) in out.data_mut().iter_mut().zip(pre.data()) {
                    *g = T::split_relu_backward(p, *g);
                }
                out
            }
        }
    }
}

/// Which key a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextSel {
    /// The registered key of one context index.
    Task(usize),
    /// Phase mixture of three registered keys, `exp(i (φ_prev + φ_cur + φ_next) / 3)`.
    Mix { prev: usize, cur: usize, next: usize },
}

impl ContextSel {
    /// Every context index the selection reads.
    pub fn indices(&self) -> Vec<usize> {
        match *self {
            ContextSel::Task(t) => vec![t],
            ContextSel::Mix { prev, cur, next } => vec![prev, cur, next],
        }
    }
}

/// Keys of one layer, drawn deterministically from a per-layer seed.
#[derive(Debug, Clone)]
pub struct Binding {
    pub(crate) seed: u64,
    pub(crate) registry: ContextRegistry,
}

impl Binding {
    pub fn new(family: Family, dim: usize, seed: u64) -> Result<Self> {
        let mut base_rng = SeededRng::new(seed).child(u64::MAX);
        Ok(Self {
            seed,
            registry: ContextRegistry::new(family, dim, &mut base_rng)?,
        })
    }

    pub fn registry(&self) -> &ContextRegistry {
        &self.registry
    }

    /// Draws the key of context `task` if it is not registered yet. The key
    /// depends only on the layer seed and `task`.
    pub fn register(&mut self, task: usize) -> Result<()> {
        let mut rng = SeededRng::new(self.seed).child(task as u64);
        self.registry.register(task, &mut rng).map(|_| ())
    }

    /// Replaces the key of `task` with the identity of the family.
    pub fn install_identity(&mut self, task: usize) -> Result<()> {
        let key = match self.registry.family() {
            Family::OnePower => {
                let base = self.registry.base().expect("one-power base").clone();
                ContextKey::gen_onepower(base, 0)?
            }
            f => ContextKey::identity(f, self.registry.dim())?,
        };
        self.registry.insert(task, key)
    }

    pub fn resolve(&self, sel: ContextSel) -> Result<ContextKey> {
        match sel {
            ContextSel::Task(t) => self.registry.key(t).cloned(),
            ContextSel::Mix { prev, cur, next } => {
                let phases = |t| {
                    self.registry.key(t)?.phases().ok_or_else(|| {
                        PspError::InvalidArgument("mixture needs phase keys".into())
                    })
                };
                ContextKey::mixture(&phases(prev)?, &phases(cur)?, &phases(next)?)
            }
        }
    }
}

/// `A^T conj(B)`, the batch form of `Σ_b δ_b u_b^H`.
fn outer_sum<T: Bindable>(delta: &Matrix<T>, u: &Matrix<T>) -> Result<Matrix<T>> {
    let ubar = u.map(T::conj);
    let mut out = Matrix::zeros(delta.cols(), u.cols());
    gemm(T::ONE, delta, Op::T, &ubar, Op::N, T::ZERO, &mut out)?;
    Ok(out)
}

fn column_sums<T: Bindable>(m: &Matrix<T>) -> Vec<T> {
    let mut out = vec![T::ZERO; m.cols()];
    for i in 0..m.rows() {
        out.iter_mut().zip(m.row(i)).for_each(|(o, &v)| *o += v);
    }
    out
}

fn add_bias<T: Bindable>(m: &mut Matrix<T>, bias: &[T]) {
    for i in 0..m.rows() {
        m.row_mut(i).iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
    }
}

/// Gradients of one layer's parameters plus the gradient for its input.
#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub input: Matrix<T>,
}

/// Values a dense forward pass keeps for backward.
#[derive(Debug, Clone)]
pub struct DenseCache<T> {
    pub bound_input: Matrix<T>,
    pub pre_activation: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct PspDense<T> {
    /// `N x M`.
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
    pub binding: Option<Binding>,
}

impl<T: Bindable> PspDense<T> {
    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    /// `g(W (C x) + b)` for every row `x` of the batch.
    pub fn forward(
        &self,
        x: &Matrix<T>,
        key: Option<&ContextKey>,
    ) -> Result<(Matrix<T>, DenseCache<T>)> {
        if x.cols() != self.inputs() {
            return Err(PspError::DimensionMismatch {
                op: "dense forward",
                expected: self.inputs().to_string(),
                got: x.cols().to_string(),
            });
        }
        let bound_input = match key {
            Some(k) => k.bind_rows(x)?,
            None => x.clone(),
        };
        let mut pre = Matrix::zeros(x.rows(), self.outputs());
        gemm(T::ONE, &bound_input, Op::N, &self.weights, Op::T, T::ZERO, &mut pre)?;
        add_bias(&mut pre, &self.bias);
        let y = self.activation.forward(&pre);
        Ok((
            y,
            DenseCache {
                bound_input,
                pre_activation: pre,
            },
        ))
    }

    /// `grad_W = δ (C x)^H`, `grad_b = δ`, `grad_x = C^H W^H δ`.
    pub fn backward(
        &self,
        cache: &DenseCache<T>,
        grad_y: &Matrix<T>,
        key: Option<&ContextKey>,
    ) -> Result<LayerGrads<T>> {
        if grad_y.shape() != cache.pre_activation.shape() {
            return Err(PspError::DimensionMismatch {
                op: "dense backward",
                expected: format!("{:?}", cache.pre_activation.shape()),
                got: format!("{:?}", grad_y.shape()),
            });
        }
        let delta = self.activation.backward(&cache.pre_activation, grad_y);
        let weights = outer_sum(&delta, &cache.bound_input)?;
        let bias = column_sums(&delta);
        let wbar = self.weights.map(T::conj);
        let mut grad_u = Matrix::zeros(delta.rows(), self.inputs());
        gemm(T::ONE, &delta, Op::N, &wbar, Op::N, T::ZERO, &mut grad_u)?;
        let input = match key {
            Some(k) => k.unbind_rows(&grad_u)?,
            None => grad_u,
        };
        Ok(LayerGrads {
            weights,
            bias,
            input,
        })
    }

    /// Weights the layer applies under `key`: `W C`.
    pub fn effective_weights(&self, key: Option<&ContextKey>) -> Result<Matrix<T>> {
        match key {
            Some(k) => k.right_mul(&self.weights, false),
            None => Ok(self.weights.clone()),
        }
    }
}

/// Shape of a convolution: `(channels, height, width)` in, kernel, stride, padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel_height: usize,
    pub kernel_width: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.in_height,
            self.in_width,
            self.out_channels,
            self.kernel_height,
            self.kernel_width,
            self.stride,
        ];
        if dims.contains(&0) {
            return Err(PspError::ZeroDimension);
        }
        if self.in_height + 2 * self.padding < self.kernel_height
            || self.in_width + 2 * self.padding < self.kernel_width
        {
            return Err(PspError::InvalidArgument("kernel larger than padded input".into()));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.kernel_height) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.kernel_width) / self.stride + 1
    }

    /// Flattened kernel length `in_channels * kh * kw`; the key dimension.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_height * self.kernel_width
    }

    pub fn in_features(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    pub fn out_features(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    /// Input index read by patch entry `(c, i, j)` at output pixel `(oy, ox)`.
    fn source(&self, c: usize, i: usize, j: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + i).checked_sub(self.padding)?;
        let x = (ox * self.stride + j).checked_sub(self.padding)?;
        (y < self.in_height && x < self.in_width)
            .then(|| (c * self.in_height + y) * self.in_width + x)
    }

    /// `(B * out_pixels) x patch_len` patch matrix.
    fn im2col<T: Bindable>(&self, x: &Matrix<T>) -> Matrix<T> {
        let (oh, ow) = (self.out_height(), self.out_width());
        let pixels = oh * ow;
        let mut cols = Matrix::zeros(x.rows() * pixels, self.patch_len());
        for b in 0..x.rows() {
            let src = x.row(b);
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = cols.row_mut(b * pixels + oy * ow + ox);
                    let mut p = 0;
                    for c in 0..self.in_channels {
                        for i in 0..self.kernel_height {
                            for j in 0..self.kernel_width {
                                if let Some(s) = self.source(c, i, j, oy, ox) {
                                    row[p] = src[s];
                                }
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Bindable>(&self, cols: &Matrix<T>, batch: usize) -> Matrix<T> {
        let (oh, ow) = (self.out_height(), self.out_width());
        let pixels = oh * ow;
        let mut x = Matrix::zeros(batch, self.in_features());
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = cols.row(b * pixels + oy * ow + ox);
                    let dst = x.row_mut(b);
                    let mut p = 0;
                    for c in 0..self.in_channels {
                        for i in 0..self.kernel_height {
                            for j in 0..self.kernel_width {
                                if let Some(s) = self.source(c, i, j, oy, ox) {
                                    dst[s] += row[p];
                                }
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub patches: Matrix<T>,
    pub effective_kernel: Matrix<T>,
    pub pre_activation: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct PspConv<T> {
    pub geometry: ConvGeometry,
    /// `out_channels x (in_channels * kh * kw)`.
    pub kernel: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
    pub binding: Option<Binding>,
}

impl<T: Bindable> PspConv<T> {
    /// Kernel modulated by the context: `w C` (`w ⊙ c` for diagonal keys).
    pub fn effective_weights(&self, key: Option<&ContextKey>) -> Result<Matrix<T>> {
        match key {
            Some(k) => k.right_mul(&self.kernel, false),
            None => Ok(self.kernel.clone()),
        }
    }

    /// Output rows are channel-major: `(n, oy, ox)` flattened.
    pub fn forward(
        &self,
        x: &Matrix<T>,
        key: Option<&ContextKey>,
    ) -> Result<(Matrix<T>, ConvCache<T>)> {
        let g = &self.geometry;
        if x.cols() != g.in_features() {
            return Err(PspError::DimensionMismatch {
                op: "conv forward",
                expected: g.in_features().to_string(),
                got: x.cols().to_string(),
            });
        }
        let effective_kernel = self.effective_weights(key)?;
        let patches = g.im2col(x);
        let mut flat = Matrix::zeros(patches.rows(), g.out_channels);
        gemm(T::ONE, &patches, Op::N, &effective_kernel, Op::T, T::ZERO, &mut flat)?;
        let pixels = g.out_height() * g.out_width();
        let mut pre = Matrix::zeros(x.rows(), g.out_features());
        for b in 0..x.rows() {
            let dst = pre.row_mut(b);
            for p in 0..pixels {
                let src = flat.row(b * pixels + p);
                for (n, &v) in src.iter().enumerate() {
                    dst[n * pixels + p] = v + self.bias[n];
                }
            }
        }
        let y = self.activation.forward(&pre);
        Ok((
            y,
            ConvCache {
                patches,
                effective_kernel,
                pre_activation: pre,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        grad_y: &Matrix<T>,
        key: Option<&ContextKey>,
    ) -> Result<LayerGrads<T>> {
        let g = &self.geometry;
        if grad_y.shape() != cache.pre_activation.shape() {
            return Err(PspError::DimensionMismatch {
                op: "conv backward",
                expected: format!("{:?}", cache.pre_activation.shape()),
                got: format!("{:?}", grad_y.shape()),
            });
        }
        let delta = self.activation.backward(&cache.pre_activation, grad_y);
        let batch = delta.rows();
        let pixels = g.out_height() * g.out_width();
        let mut flat = Matrix::zeros(batch * pixels, g.out_channels);
        let mut bias = vec![T::ZERO; g.out_channels];
        for b in 0..batch {
            let src = delta.row(b);
            for p in 0..pixels {
                let dst = flat.row_mut(b * pixels + p);
                for n in 0..g.out_channels {
                    dst[n] = src[n * pixels + p];
                    bias[n] += src[n * pixels + p];
                }
            }
        }
        let grad_effective = outer_sum(&flat, &cache.patches)?;
        let weights = match key {
            // d/dw of (w C) pulls back through C^H = C^-1.
            Some(k) => k.right_mul(&grad_effective, true)?,
            None => grad_effective,
        };
        let kbar = cache.effective_kernel.map(T::conj);
        let mut grad_patches = Matrix::zeros(flat.rows(), g.patch_len());
        gemm(T::ONE, &flat, Op::N, &kbar, Op::N, T::ZERO, &mut grad_patches)?;
        let input = g.col2im(&grad_patches, batch);
        Ok(LayerGrads {
            weights,
            bias,
            input,
        })
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Dense(PspDense<T>),
    Conv(PspConv<T>),
}

#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Dense(DenseCache<T>),
    Conv(ConvCache<T>),
}

impl<T: Bindable> Layer<T> {
    pub fn in_features(&self) -> usize {
        match self {
            Layer::Dense(d) => d.inputs(),
            Layer::Conv(c) => c.geometry.in_features(),
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            Layer::Dense(d) => d.outputs(),
            Layer::Conv(c) => c.geometry.out_features(),
        }
    }

    /// Dimension a key of this layer acts on.
    pub fn key_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.inputs(),
            Layer::Conv(c) => c.geometry.patch_len(),
        }
    }

    pub fn binding(&self) -> Option<&Binding> {
        match self {
            Layer::Dense(d) => d.binding.as_ref(),
            Layer::Conv(c) => c.binding.as_ref(),
        }
    }

    pub fn binding_mut(&mut self) -> Option<&mut Binding> {
        match self {
            Layer::Dense(d) => d.binding.as_mut(),
            Layer::Conv(c) => c.binding.as_mut(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Dense(d) => d.activation,
            Layer::Conv(c) => c.activation,
        }
    }

    /// The superposed weight block (dense `W` or flattened conv kernel).
    pub fn weights(&self) -> &Matrix<T> {
        match self {
            Layer::Dense(d) => &d.weights,
            Layer::Conv(c) => &c.kernel,
        }
    }

    pub fn weights_mut(&mut self) -> &mut Matrix<T> {
        match self {
            Layer::Dense(d) => &mut d.weights,
            Layer::Conv(c) => &mut c.kernel,
        }
    }

    pub fn bias(&self) -> &[T] {
        match self {
            Layer::Dense(d) => &d.bias,
            Layer::Conv(c) => &c.bias,
        }
    }

    pub fn bias_mut(&mut self) -> &mut Vec<T> {
        match self {
            Layer::Dense(d) => &mut d.bias,
            Layer::Conv(c) => &mut c.bias,
        }
    }

    pub fn resolve(&self, sel: ContextSel) -> Result<Option<ContextKey>> {
        self.binding().map(|b| b.resolve(sel)).transpose()
    }

    pub fn forward(
        &self,
        x: &Matrix<T>,
        key: Option<&ContextKey>,
    ) -> Result<(Matrix<T>, LayerCache<T>)> {
        match self {
            Layer::Dense(d) => d.forward(x, key).map(|(y, c)| (y, LayerCache::Dense(c))),
            Layer::Conv(c) => c.forward(x, key).map(|(y, k)| (y, LayerCache::Conv(k))),
        }
    }

    pub fn backward(
        &self,
        cache: &LayerCache<T>,
        grad_y: &Matrix<T>,
        key: Option<&ContextKey>,
    ) -> Result<LayerGrads<T>> {
        match (self, cache) {
            (Layer::Dense(d), LayerCache::Dense(c)) => d.backward(c, grad_y, key),
            (Layer::Conv(c), LayerCache::Conv(k)) => c.backward(k, grad_y, key),
            _ => Err(PspError::InvalidArgument("cache from a different layer kind".into())),
        }
    }

    /// Weights the layer applies under `key`.
    pub fn effective_weights(&self, key: Option<&ContextKey>) -> Result<Matrix<T>> {
        match self {
            Layer::Dense(d) => d.effective_weights(key),
            Layer::Conv(c) => c.effective_weights(key),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use psp_core::linalg::{ComplexMatrix, RealMatrix};
    use psp_core::Complex64;

    fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> RealMatrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gaussian())
    }

    fn dense(w: RealMatrix, act: Activation) -> PspDense<f64> {
        let n = w.rows();
        PspDense {
            weights: w,
            bias: vec![0.0; n],
            activation: act,
            binding: None,
        }
    }

    #[test]
    fn identity_key_dense_is_plain_matvec() {
        let mut rng = SeededRng::new(1);
        let layer = dense(random_matrix(3, 5, &mut rng), Activation::Identity);
        let x = random_matrix(2, 5, &mut rng);
        let key = ContextKey::identity(Family::Binary, 5).unwrap();
        let (y, _) = layer.forward(&x, Some(&key)).unwrap();
        for b in 0..2 {
            let want = layer.weights.matvec(x.row(b)).unwrap();
            for (a, w) in y.row(b).iter().zip(&want) {
                assert!((a - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn binary_key_equals_sign_flipped_input() {
        let mut rng = SeededRng::new(2);
        let layer = dense(random_matrix(4, 6, &mut rng), Activation::Relu);
        let key = ContextKey::gen_binary(6, &mut rng).unwrap();
        let x = random_matrix(3, 6, &mut rng);
        let flipped = key.bind_rows(&x).unwrap();
        let (a, _) = layer.forward(&x, Some(&key)).unwrap();
        let (b, _) = layer.forward(&flipped, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn complex_layer_matches_straight_line_oracle() {
        let mut rng = SeededRng::new(3);
        let (n, m) = (3, 4);
        let w: ComplexMatrix =
            Matrix::from_fn(n, m, |_, _| Complex64::new(rng.gaussian(), rng.gaussian()));
        let bias: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.gaussian(), 0.1)).collect();
        let layer = PspDense {
            weights: w.clone(),
            bias: bias.clone(),
            activation: Activation::Identity,
            binding: None,
        };
        let key = ContextKey::gen_complex(m, &mut rng).unwrap();
        let ContextKey::ComplexPhase { phases } = &key else { unreachable!() };
        let x = rng.gaussian_vec(m);
        let (y, _) = layer
            .forward(&RealMatrix::from_vec(1, m, x.clone()).unwrap().to_complex(), Some(&key))
            .unwrap();
        for i in 0..n {
            // Re( Σ_j (a + ib)(cos φ + i sin φ) x_j ) + Re b_i
            let mut re = bias[i].re;
            for j in 0..m {
                let (a, b) = (w.get(i, j).re, w.get(i, j).im);
                re += (a * phases[j].cos() - b * phases[j].sin()) * x[j];
            }
            assert!((y.get(0, i).re - re).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_grad_is_plain_grad_with_flipped_columns() {
        let mut rng = SeededRng::new(4);
        let layer = dense(random_matrix(3, 5, &mut rng), Activation::Identity);
        let key = ContextKey::gen_binary(5, &mut rng).unwrap();
        let ContextKey::Binary { signs } = &key else { unreachable!() };
        let x = random_matrix(4, 5, &mut rng);
        let gy = random_matrix(4, 3, &mut rng);
        let (_, cache) = layer.forward(&x, Some(&key)).unwrap();
        let psp = layer.backward(&cache, &gy, Some(&key)).unwrap();
        // Plain layer whose weights are the read-out W C; its gradient bound by C.
        let plain = dense(layer.effective_weights(Some(&key)).unwrap(), Activation::Identity);
        let (_, pc) = plain.forward(&x, None).unwrap();
        let pg = plain.backward(&pc, &gy, None).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let want = pg.weights.get(i, j) * signs[j] as f64;
                assert!((psp.weights.get(i, j) - want).abs() < 1e-12);
            }
        }
        assert!(psp.input.max_abs_diff(&pg.input) < 1e-12);
    }

    /// Six-loop direct convolution.
    fn naive_conv(g: &ConvGeometry, kernel: &RealMatrix, x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; g.out_features()];
        for n in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for c in 0..g.in_channels {
                        for i in 0..g.kernel_height {
                            for j in 0..g.kernel_width {
                                let y = (oy * g.stride + i) as isize - g.padding as isize;
                                let xx = (ox * g.stride + j) as isize - g.padding as isize;
                                if y < 0 || xx < 0 || y >= g.in_height as isize || xx >= g.in_width as isize {
                                    continue;
                                }
                                let k = kernel.get(n, (c * g.kernel_height + i) * g.kernel_width + j);
                                s += k * x[(c * g.in_height + y as usize) * g.in_width + xx as usize];
                            }
                        }
                    }
                    out[(n * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    fn conv(g: ConvGeometry, kernel: RealMatrix) -> PspConv<f64> {
        PspConv {
            geometry: g,
            kernel,
            bias: vec![0.0; g.out_channels],
            activation: Activation::Identity,
            binding: None,
        }
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = SeededRng::new(5);
        for (stride, padding) in [(1, 0), (2, 1), (1, 2)] {
            let g = ConvGeometry {
                in_channels: 2,
                in_height: 8,
                in_width: 7,
                out_channels: 3,
                kernel_height: 3,
                kernel_width: 3,
                stride,
                padding,
            };
            let layer = conv(g, random_matrix(3, g.patch_len(), &mut rng));
            let x = random_matrix(2, g.in_features(), &mut rng);
            let ones = ContextKey::identity(Family::Binary, g.patch_len()).unwrap();
            let (y, _) = layer.forward(&x, Some(&ones)).unwrap();
            for b in 0..2 {
                let want = naive_conv(&g, &layer.kernel, x.row(b));
                for (a, w) in y.row(b).iter().zip(&want) {
                    assert!((a - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn binary_context_conv_matches_modulated_kernel_oracle() {
        let mut rng = SeededRng::new(6);
        let g = ConvGeometry {
            in_channels: 1,
            in_height: 8,
            in_width: 8,
            out_channels: 2,
            kernel_height: 3,
            kernel_width: 3,
            stride: 1,
            padding: 0,
        };
        let layer = conv(g, random_matrix(2, 9, &mut rng));
        let key = ContextKey::gen_binary(9, &mut rng).unwrap();
        let ContextKey::Binary { signs } = &key else { unreachable!() };
        let modulated = Matrix::from_fn(2, 9, |n, p| layer.kernel.get(n, p) * signs[p] as f64);
        let x = random_matrix(1, 64, &mut rng);
        let (y, _) = layer.forward(&x, Some(&key)).unwrap();
        let want = naive_conv(&g, &modulated, x.row(0));
        for (a, w) in y.row(0).iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn one_by_one_conv_is_per_pixel_dense() {
        let mut rng = SeededRng::new(7);
        let g = ConvGeometry {
            in_channels: 3,
            in_height: 4,
            in_width: 4,
            out_channels: 2,
            kernel_height: 1,
            kernel_width: 1,
            stride: 1,
            padding: 0,
        };
        let kernel = random_matrix(2, 3, &mut rng);
        let layer = conv(g, kernel.clone());
        let x = random_matrix(1, g.in_features(), &mut rng);
        let (y, _) = layer.forward(&x, None).unwrap();
        for p in 0..16 {
            let pixel: Vec<f64> = (0..3).map(|c| x.get(0, c * 16 + p)).collect();
            let want = kernel.matvec(&pixel).unwrap();
            for n in 0..2 {
                assert!((y.get(0, n * 16 + p) - want[n]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixture_resolves_from_registered_phases() {
        let mut b = Binding::new(Family::Complex, 4, 9).unwrap();
        for t in 0..3 {
            b.register(t).unwrap();
        }
        let p: Vec<Vec<f64>> = (0..3)
            .map(|t| b.registry().key(t).unwrap().phases().unwrap())
            .collect();
        let mixed = b.resolve(ContextSel::Mix { prev: 0, cur: 1, next: 2 }).unwrap();
        let got = mixed.phases().unwrap();
        for j in 0..4 {
            assert!((got[j] - (p[0][j] + p[1][j] + p[2][j]) / 3.0).abs() < 1e-15);
        }
        assert!(matches!(b.resolve(ContextSel::Task(7)), Err(PspError::UnknownTask(7))));
    }

    #[test]
    fn registration_is_order_independent() {
        let mut a = Binding::new(Family::Binary, 16, 3).unwrap();
        let mut b = Binding::new(Family::Binary, 16, 3).unwrap();
        a.register(0).unwrap();
        a.register(5).unwrap();
        b.register(5).unwrap();
        assert_eq!(a.resolve(ContextSel::Task(5)).unwrap(), b.resolve(ContextSel::Task(5)).unwrap());
    }
}
