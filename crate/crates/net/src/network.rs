use psp_core::context::{ByteReader, ContextKey, ContextRegistry, Family, FORMAT_VERSION};
use psp_core::linalg::{Matrix, RealMatrix, SeededRng};
use psp_core::{Bindable, PspError, Result};
use serde::{Deserialize, Serialize};

use crate::layer::{
    Activation, Binding, ContextSel, ConvGeometry, Layer, LayerGrads, PspConv, PspDense,
};
use crate::loss::{argmax_rows, complex_readout, complex_readout_backward, softmax_cross_entropy};
use crate::sgd::{sgd_step, sgd_step_vec};

const NETWORK_MAGIC: &[u8; 4] = b"PSPN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        units: usize,
        activation: Activation,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub family: Family,
    /// `(channels, height, width)`; dense-only networks use `(1, 1, features)`.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    /// Bind the first layer's input (the raw pixels) too.
    pub bind_input_layer: bool,
    pub seed: u64,
}

impl NetworkSpec {
    /// ReLU hidden layers followed by a linear output layer.
    pub fn mlp(family: Family, inputs: usize, hidden: &[usize], classes: usize, seed: u64) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&units| LayerSpec::Dense {
                units,
                activation: Activation::Relu,
            })
            .collect();
        layers.push(LayerSpec::Dense {
            units: classes,
            activation: Activation::Identity,
        });
        Self {
            family,
            input: (1, 1, inputs),
            layers,
            bind_input_layer: true,
            seed,
        }
    }

    pub fn in_features(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }
}

/// Layers applied in order; the output layer's real part is the logits.
#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
}

/// Per-layer caches of one forward pass.
pub struct Trace<T> {
    keys: Vec<Option<ContextKey>>,
    caches: Vec<crate::layer::LayerCache<T>>,
}

impl<T: Bindable> Network<T> {
    /// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))` on the real
    /// part, zero imaginary part, zero biases. The draws are the same for real
    /// and complex networks built from the same seed.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        if spec.family != Family::Standard && spec.family.is_complex() != (T::COMPONENTS == 2) {
            return Err(PspError::InvalidArgument(format!(
                "{} networks need {} weights",
                spec.family,
                if spec.family.is_complex() { "complex" } else { "real" }
            )));
        }
        if spec.layers.is_empty() {
            return Err(PspError::InvalidArgument("network needs at least one layer".into()));
        }
        let root = SeededRng::new(spec.seed);
        let mut shape = spec.input;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, ls) in spec.layers.iter().enumerate() {
            let mut rng = root.child(l as u64);
            let bind = spec.family != Family::Standard && (l > 0 || spec.bind_input_layer);
            let binding_seed = root.child((1u64 << 32) + l as u64).seed();
            let mut uniform = |n: usize, m: usize| {
                let a = (6.0 / m as f64).sqrt();
                Matrix::from_fn(n, m, |_, _| T::from_real(a * (2.0 * rng.uniform() - 1.0)))
            };
            let layer = match *ls {
                LayerSpec::Dense { units, activation } => {
                    let inputs = shape.0 * shape.1 * shape.2;
                    if units == 0 || inputs == 0 {
                        return Err(PspError::ZeroDimension);
                    }
                    shape = (1, 1, units);
                    Layer::Dense(PspDense {
                        weights: uniform(units, inputs),
                        bias: vec![T::ZERO; units],
                        activation,
                        binding: bind
                            .then(|| Binding::new(spec.family, inputs, binding_seed))
                            .transpose()?,
                    })
                }
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    activation,
                } => {
                    let geometry = ConvGeometry {
                        in_channels: shape.0,
                        in_height: shape.1,
                        in_width: shape.2,
                        out_channels,
                        kernel_height: kernel,
                        kernel_width: kernel,
                        stride,
                        padding,
                    };
                    geometry.validate()?;
                    shape = (out_channels, geometry.out_height(), geometry.out_width());
                    Layer::Conv(PspConv {
                        geometry,
                        kernel: uniform(out_channels, geometry.patch_len()),
                        bias: vec![T::ZERO; out_channels],
                        activation,
                        binding: bind
                            .then(|| Binding::new(spec.family, geometry.patch_len(), binding_seed))
                            .transpose()?,
                    })
                }
            };
            layers.push(layer);
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn in_features(&self) -> usize {
        self.spec.in_features()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("non-empty").out_features()
    }

    /// Trainable real scalars, complex weights counting two.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| (l.weights().data().len() + l.bias().len()) * T::COMPONENTS)
            .sum()
    }

    /// Draws the keys of context `ctx` in every bound layer.
    pub fn register_context(&mut self, ctx: usize) -> Result<()> {
        self.layers
            .iter_mut()
            .filter_map(|l| l.binding_mut())
            .try_for_each(|b| b.register(ctx))
    }

    /// Makes context `ctx` the identity in every bound layer.
    pub fn install_identity(&mut self, ctx: usize) -> Result<()> {
        self.layers
            .iter_mut()
            .filter_map(|l| l.binding_mut())
            .try_for_each(|b| b.install_identity(ctx))
    }

    pub fn resolve(&self, sel: ContextSel) -> Result<Vec<Option<ContextKey>>> {
        self.layers.iter().map(|l| l.resolve(sel)).collect()
    }

    fn lift(&self, x: &RealMatrix) -> Result<Matrix<T>> {
        if x.cols() != self.in_features() {
            return Err(PspError::DimensionMismatch {
                op: "network input",
                expected: self.in_features().to_string(),
                got: x.cols().to_string(),
            });
        }
        Ok(T::lift_matrix(x))
    }

    /// Raw (possibly complex) outputs of the last layer plus the trace.
    pub fn forward(&self, x: &RealMatrix, sel: ContextSel) -> Result<(Matrix<T>, Trace<T>)> {
        let keys = self.resolve(sel)?;
        let mut h = self.lift(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for (layer, key) in self.layers.iter().zip(&keys) {
            let (y, cache) = layer.forward(&h, key.as_ref())?;
            caches.push(cache);
            h = y;
        }
        Ok((h, Trace { keys, caches }))
    }

    pub fn logits(&self, x: &RealMatrix, sel: ContextSel) -> Result<RealMatrix> {
        Ok(complex_readout(&self.forward(x, sel)?.0))
    }

    /// Back-propagates `grad_out` (gradient for the raw outputs).
    pub fn backward(&self, trace: &Trace<T>, grad_out: Matrix<T>) -> Result<Vec<LayerGrads<T>>> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out;
        for ((layer, cache), key) in self.layers.iter().zip(&trace.caches).zip(&trace.keys).rev() {
            let lg = layer.backward(cache, &g, key.as_ref())?;
            g = lg.input.clone();
            grads.push(lg);
        }
        grads.reverse();
        Ok(grads)
    }

    /// Mean cross-entropy of the read-out logits and every layer's gradients.
    pub fn loss_and_grads(
        &self,
        x: &RealMatrix,
        labels: &[usize],
        sel: ContextSel,
    ) -> Result<(f64, Vec<LayerGrads<T>>)> {
        let (out, trace) = self.forward(x, sel)?;
        let (loss, grad_logits) = softmax_cross_entropy(&complex_readout(&out), labels)?;
        let grads = self.backward(&trace, complex_readout_backward(&grad_logits))?;
        Ok((loss, grads))
    }

    pub fn apply_grads(&mut self, grads: &[LayerGrads<T>], lr: f64) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(PspError::DimensionMismatch {
                op: "apply_grads",
                expected: self.layers.len().to_string(),
                got: grads.len().to_string(),
            });
        }
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            sgd_step(layer.weights_mut(), &g.weights, lr)?;
            sgd_step_vec(layer.bias_mut(), &g.bias, lr)?;
            if !layer.weights().is_finite() {
                return Err(PspError::InvalidArgument("weights diverged".into()));
            }
        }
        Ok(())
    }

    /// One SGD step on a batch; returns the loss before the update.
    pub fn train_step(
        &mut self,
        x: &RealMatrix,
        labels: &[usize],
        sel: ContextSel,
        lr: f64,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(x, labels, sel)?;
        self.apply_grads(&grads, lr)?;
        Ok(loss)
    }

    /// Weights layer `l` applies under `sel`: the read-out `W C_k`.
    pub fn readout_weights(&self, l: usize, sel: ContextSel) -> Result<Matrix<T>> {
        let layer = self
            .layers
            .get(l)
            .ok_or_else(|| PspError::InvalidArgument(format!("no layer {l}")))?;
        layer.effective_weights(layer.resolve(sel)?.as_ref())
    }

    /// Checkpoint: `"PSPN"`, version, family tag, component count, then the
    /// spec as JSON (u64 length prefix) and per layer its registry (base,
    /// keys in the context byte format) followed by weights and bias
    /// row-major as f64 LE, re/im pairs for complex networks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(NETWORK_MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.spec.family.tag());
        out.push(T::COMPONENTS as u8);
        let spec = serde_json::to_vec(&self.spec).expect("spec serializes");
        put_u64(&mut out, spec.len() as u64);
        out.extend_from_slice(&spec);
        for layer in &self.layers {
            match layer.binding() {
                None => out.push(0),
                Some(b) => {
                    out.push(1);
                    let reg = b.registry();
                    match reg.base() {
                        Some(base) => {
                            out.push(1);
                            base.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                        }
                        None => out.push(0),
                    }
                    put_u64(&mut out, reg.len() as u64);
                    for task in reg.tasks() {
                        let key = reg.key(task).expect("listed task").to_bytes();
                        put_u64(&mut out, task as u64);
                        put_u64(&mut out, key.len() as u64);
                        out.extend_from_slice(&key);
                    }
                }
            }
            for v in layer.weights().data().iter().chain(layer.bias()) {
                for c in 0..T::COMPONENTS {
                    out.extend_from_slice(&v.component(c).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != NETWORK_MAGIC {
            return Err(PspError::Format("bad network magic".into()));
        }
        if r.u8()? != FORMAT_VERSION {
            return Err(PspError::Format("unsupported network version".into()));
        }
        let family = Family::from_tag(r.u8()?)?;
        if r.u8()? as usize != T::COMPONENTS {
            return Err(PspError::Format("checkpoint scalar type differs".into()));
        }
        let spec_len = r.len_u64()?;
        let spec: NetworkSpec = serde_json::from_slice(r.take(spec_len)?)
            .map_err(|e| PspError::Format(format!("spec: {e}")))?;
        if spec.family != family {
            return Err(PspError::Format("family tag disagrees with spec".into()));
        }
        let mut net = Self::new(spec).map_err(|e| PspError::Format(e.to_string()))?;
        for layer in net.layers.iter_mut() {
            let dim = layer.key_dim();
            let bound = r.u8()?;
            if (bound == 1) != layer.binding().is_some() {
                return Err(PspError::Format("binding flag disagrees with spec".into()));
            }
            if let Some(binding) = layer.binding_mut() {
                let base = match r.u8()? {
                    0 => None,
                    _ => Some(r.f64s(dim)?.into()),
                };
                let count = r.len_u64()?;
                let mut keys = Vec::new();
                for _ in 0..count {
                    let task = r.len_u64()?;
                    let len = r.len_u64()?;
                    keys.push((task, ContextKey::from_bytes(r.take(len)?)?));
                }
                binding.registry = ContextRegistry::restore(family, dim, base, keys)?;
            }
            let n = layer.weights().data().len();
            let raw = r.f64s(
                (n + layer.bias().len())
                    .checked_mul(T::COMPONENTS)
                    .ok_or_else(|| PspError::Format("dimension overflow".into()))?,
            )?;
            let mut values = raw.chunks_exact(T::COMPONENTS).map(|c| {
                c.iter()
                    .enumerate()
                    .fold(T::ZERO, |acc, (i, &v)| acc.with_component(i, v))
            });
            for w in layer.weights_mut().data_mut() {
                *w = values.next().expect("sized");
            }
            for b in layer.bias_mut().iter_mut() {
                *b = values.next().expect("sized");
            }
        }
        r.finish()?;
        Ok(net)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Accuracy and mean loss of a batch of logits.
pub fn score(logits: &RealMatrix, labels: &[usize]) -> Result<(f64, f64)> {
    let (loss, _) = softmax_cross_entropy(logits, labels)?;
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok((hits as f64 / labels.len().max(1) as f64, loss))
}

/// Object-safe view of a network, whatever its scalar field.
pub trait Model: Send {
    fn spec(&self) -> &NetworkSpec;
    fn register_context(&mut self, ctx: usize) -> Result<()>;
    fn install_identity(&mut self, ctx: usize) -> Result<()>;
    fn train_batch(&mut self, x: &RealMatrix, labels: &[usize], sel: ContextSel, lr: f64)
        -> Result<f64>;
    fn logits(&self, x: &RealMatrix, sel: ContextSel) -> Result<RealMatrix>;
    fn parameter_count(&self) -> usize;
    fn to_bytes(&self) -> Vec<u8>;

    /// `(accuracy, mean loss)` on a labelled batch.
    fn evaluate(&self, x: &RealMatrix, labels: &[usize], sel: ContextSel) -> Result<(f64, f64)> {
        score(&self.logits(x, sel)?, labels)
    }
}

impl<T: Bindable + Send> Model for Network<T> {
    fn spec(&self) -> &NetworkSpec {
        Network::spec(self)
    }
    fn register_context(&mut self, ctx: usize) -> Result<()> {
        Network::register_context(self, ctx)
    }
    fn install_identity(&mut self, ctx: usize) -> Result<()> {
        Network::install_identity(self, ctx)
    }
    fn train_batch(
        &mut self,
        x: &RealMatrix,
        labels: &[usize],
        sel: ContextSel,
        lr: f64,
    ) -> Result<f64> {
        self.train_step(x, labels, sel, lr)
    }
    fn logits(&self, x: &RealMatrix, sel: ContextSel) -> Result<RealMatrix> {
        Network::logits(self, x, sel)
    }
    fn parameter_count(&self) -> usize {
        Network::parameter_count(self)
    }
    fn to_bytes(&self) -> Vec<u8> {
        Network::to_bytes(self)
    }
}

/// Real network for standard, binary and rotational specs; complex for
/// complex and one-power specs.
pub fn build_model(spec: NetworkSpec) -> Result<Box<dyn Model>> {
    Ok(if spec.family.is_complex() {
        Box::new(Network::<psp_core::Complex64>::new(spec)?)
    } else {
        Box::new(Network::<f64>::new(spec)?)
    })
}

/// Loads a checkpoint written by [`Model::to_bytes`].
pub fn load_model(bytes: &[u8]) -> Result<Box<dyn Model>> {
    let family = Family::from_tag(*bytes.get(5).ok_or_else(|| PspError::Format("truncated".into()))?)?;
    let components = *bytes.get(6).ok_or_else(|| PspError::Format("truncated".into()))?;
    Ok(match (family.is_complex(), components) {
        (_, 2) => Box::new(Network::<psp_core::Complex64>::from_bytes(bytes)?),
        (false, 1) => Box::new(Network::<f64>::from_bytes(bytes)?),
        _ => return Err(PspError::Format("bad component count".into())),
    })
}
