//! Training through the superposition versus training each model alone.
//!
//! With read-out `ρ(W) = W C_k`, an SGD step on the superposed block moves the
//! read-out by `-lr ∇_W J C_k = -lr δ x^H C_k^H C_k = -lr δ x^H`, the step an
//! independent model would take, except that `δ` is computed with the noisy
//! read-out. With one stored model the noise is zero and the trajectories
//! coincide.

use psp_core::context::{ContextKey, Family};
use psp_core::linalg::{Matrix, RealMatrix, SeededRng};
use psp_core::{Bindable, Complex64, PspError, Result};
use serde::{Deserialize, Serialize};

use crate::layer::{Activation, ContextSel, PspDense};
use crate::loss::mean_squared_error;
use crate::network::{LayerSpec, Network, NetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    pub family: Family,
    /// Input dimension (key dimension).
    pub m: usize,
    /// Output dimension.
    pub n: usize,
    /// Models stored in the block.
    pub k: usize,
    pub batch: usize,
    /// Dimension of the input subspace shared by data and models.
    pub rank: usize,
    pub trials: usize,
    pub lr: f64,
    pub seed: u64,
}

impl EquivalenceConfig {
    pub fn new(family: Family, m: usize, n: usize, k: usize, seed: u64) -> Self {
        Self {
            family,
            m,
            n,
            k,
            batch: 32,
            rank: 4,
            trials: 4,
            lr: 0.01,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub config: EquivalenceConfig,
    /// Largest `|δŵ - δw|_F / |δw|_F` over trials.
    pub max_deviation: f64,
    pub mean_deviation: f64,
}

fn gen_key(family: Family, m: usize, rng: &mut SeededRng) -> Result<ContextKey> {
    match family {
        Family::Binary => ContextKey::gen_binary(m, rng),
        Family::Complex => ContextKey::gen_complex(m, rng),
        Family::OnePower => {
            let base: Vec<f64> = (0..m).map(|_| rng.angle()).collect();
            ContextKey::gen_onepower(base.into(), 1)
        }
        Family::Rotational => ContextKey::gen_rotational(m, rng),
        Family::Standard => Err(PspError::InvalidArgument("standard has no keys".into())),
    }
}

/// One trial: relative deviation of the read-out update from the independent one.
fn equivalence_trial<T: Bindable>(cfg: &EquivalenceConfig, rng: &mut SeededRng) -> Result<f64> {
    let (m, n, r) = (cfg.m, cfg.n, cfg.rank);
    let scale = 1.0 / (m as f64).sqrt();
    let u = RealMatrix::from_fn(m, r, |_, _| scale * rng.gaussian());
    // Rows of every model lie in span(U): models are aligned with the data.
    let model = |rng: &mut SeededRng| -> Result<Matrix<T>> {
        let a = RealMatrix::from_fn(n, r, |_, _| rng.gaussian());
        Ok(T::lift_matrix(&a.matmul(&u.transpose())?))
    };
    let mut keys = Vec::with_capacity(cfg.k);
    let mut block = Matrix::<T>::zeros(n, m);
    let mut first = None;
    for i in 0..cfg.k {
        let w = model(rng)?;
        // One-power keys share a base; draw it once and use exponents 1..=K.
        let key = match (cfg.family, keys.first()) {
            (Family::OnePower, Some(ContextKey::OnePower { base, .. })) => {
                ContextKey::gen_onepower(base.clone(), i as i64 + 1)?
            }
            _ => gen_key(cfg.family, m, rng)?,
        };
        block.axpy(T::ONE, &key.right_mul(&w, true)?)?;
        if i == 0 {
            first = Some(w);
        }
        keys.push(key);
    }
    let w1 = first.expect("k >= 1");
    let z = RealMatrix::from_fn(cfg.batch, r, |_, _| rng.gaussian());
    let x = T::lift_matrix(&z.matmul(&u.transpose())?);
    let b = RealMatrix::from_fn(n, r, |_, _| rng.gaussian());
    let target = T::lift_matrix(&z.matmul(&b.transpose())?);

    let layer = |w: Matrix<T>| PspDense {
        bias: vec![T::ZERO; n],
        weights: w,
        activation: Activation::Identity,
        binding: None,
    };
    let psp = layer(block);
    let (y, cache) = psp.forward(&x, Some(&keys[0]))?;
    let (_, gy) = mean_squared_error(&y, &target)?;
    let grad = psp.backward(&cache, &gy, Some(&keys[0]))?.weights;
    let mut step_psp = keys[0].right_mul(&grad, false)?;
    step_psp = step_psp.scaled(-cfg.lr);

    let solo = layer(w1);
    let (y, cache) = solo.forward(&x, None)?;
    let (_, gy) = mean_squared_error(&y, &target)?;
    let step_solo = solo.backward(&cache, &gy, None)?.weights.scaled(-cfg.lr);

    let denom = step_solo.frobenius_norm();
    step_psp.axpy(-T::ONE, &step_solo)?;
    Ok(step_psp.frobenius_norm() / denom)
}

/// Compares the read-out update of model 1 trained inside a block of `K`
/// superposed models with the update of model 1 trained alone.
pub fn gradient_equivalence_check(cfg: &EquivalenceConfig) -> Result<EquivalenceReport> {
    if cfg.k == 0 || cfg.m == 0 || cfg.n == 0 || cfg.batch == 0 || cfg.rank == 0 || cfg.trials == 0
    {
        return Err(PspError::ZeroDimension);
    }
    let root = SeededRng::new(cfg.seed);
    let mut devs = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let mut rng = root.child(t as u64);
        devs.push(match cfg.family {
            Family::Binary | Family::Rotational => equivalence_trial::<f64>(cfg, &mut rng)?,
            Family::Complex | Family::OnePower => equivalence_trial::<Complex64>(cfg, &mut rng)?,
            Family::Standard => {
                return Err(PspError::InvalidArgument("standard has no read-out".into()))
            }
        });
    }
    Ok(EquivalenceReport {
        config: *cfg,
        max_deviation: devs.iter().copied().fold(0.0, f64::max),
        mean_deviation: devs.iter().sum::<f64>() / devs.len() as f64,
    })
}

/// Trains one model in superposition (a single context) and the same model
/// unbound on identical batches. Returns, per step, the largest absolute
/// difference between the read-out weights and biases of the two.
pub fn readout_trajectory_check(
    family: Family,
    dims: &[usize],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    match family {
        Family::Binary | Family::Rotational => trajectory::<f64>(family, dims, steps, lr, seed),
        Family::Complex | Family::OnePower => trajectory::<Complex64>(family, dims, steps, lr, seed),
        Family::Standard => Err(PspError::InvalidArgument("standard has no read-out".into())),
    }
}

fn trajectory<T: Bindable>(
    family: Family,
    dims: &[usize],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if dims.len() < 2 {
        return Err(PspError::InvalidArgument("need input and output dimensions".into()));
    }
    let hidden = &dims[1..dims.len() - 1];
    let classes = *dims.last().expect("len >= 2");
    let mut psp = Network::<T>::new(NetworkSpec::mlp(family, dims[0], hidden, classes, seed))?;
    psp.register_context(0)?;
    let sel = ContextSel::Task(0);

    let mut solo = Network::<T>::new(NetworkSpec::mlp(Family::Standard, dims[0], hidden, classes, seed))?;
    for l in 0..psp.layers().len() {
        let readout = psp.readout_weights(l, sel)?;
        let bias = psp.layers()[l].bias().to_vec();
        let layer = &mut solo.layers_mut()[l];
        *layer.weights_mut() = readout;
        *layer.bias_mut() = bias;
    }

    let mut rng = SeededRng::new(seed).child(7);
    let teacher = RealMatrix::from_fn(classes, dims[0], |_, _| rng.gaussian());
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut r = rng.child(step as u64);
        let x = RealMatrix::from_fn(16, dims[0], |_, _| r.gaussian());
        let labels: Vec<usize> = (0..16)
            .map(|b| {
                let s = teacher.matvec(x.row(b)).expect("shape");
                (0..classes).max_by(|&i, &j| s[i].total_cmp(&s[j])).expect("classes > 0")
            })
            .collect();
        psp.train_step(&x, &labels, sel, lr)?;
        solo.train_step(&x, &labels, ContextSel::Task(0), lr)?;
        let mut worst: f64 = 0.0;
        for l in 0..psp.layers().len() {
            let a = psp.readout_weights(l, sel)?;
            worst = worst.max(a.max_abs_diff(solo.layers()[l].weights()));
            for (p, q) in psp.layers()[l].bias().iter().zip(solo.layers()[l].bias()) {
                worst = worst.max((*p - *q).modulus());
            }
        }
        out.push(worst);
    }
    Ok(out)
}

/// Layer shapes of the small audit network `(16 -> 8 -> 4)`: either two dense
/// layers, or a 3x3 convolution on a 1x4x4 input (giving 2x2x2 = 8 features)
/// followed by a dense layer.
pub fn audit_spec(family: Family, conv: bool, seed: u64) -> NetworkSpec {
    if conv {
        NetworkSpec {
            family,
            input: (1, 4, 4),
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    units: 4,
                    activation: Activation::Identity,
                },
            ],
            bind_input_layer: true,
            seed,
        }
    } else {
        NetworkSpec::mlp(family, 16, &[8], 4, seed)
    }
}

/// Largest `|a - f| / max(|a|, |f|, 1e-4)` between analytic gradients and
/// central differences (step `h`) over every real component of every
/// parameter, on a random batch under context 0.
pub fn finite_difference_audit(spec: NetworkSpec, h: f64) -> Result<f64> {
    if spec.family.is_complex() {
        audit::<Complex64>(spec, h)
    } else {
        audit::<f64>(spec, h)
    }
}

fn audit<T: Bindable>(spec: NetworkSpec, h: f64) -> Result<f64> {
    let seed = spec.seed;
    let mut net = Network::<T>::new(spec)?;
    net.register_context(0)?;
    let mut rng = SeededRng::new(seed).child(99);
    // Nonzero biases so that bias gradients and ReLU masks are exercised.
    for layer in net.layers_mut() {
        for b in layer.bias_mut() {
            for c in 0..T::COMPONENTS {
                *b = b.with_component(c, 0.1 * rng.gaussian());
            }
        }
    }
    let sel = ContextSel::Task(0);
    let x = RealMatrix::from_fn(5, net.in_features(), |_, _| rng.gaussian());
    let labels: Vec<usize> = (0..5).map(|_| rng.below(net.classes())).collect();
    let (_, grads) = net.loss_and_grads(&x, &labels, sel)?;
    let loss = |n: &Network<T>| n.loss_and_grads(&x, &labels, sel).map(|(l, _)| l);
    let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-4);

    let mut worst: f64 = 0.0;
    for l in 0..net.layers().len() {
        let nw = net.layers()[l].weights().data().len();
        let nb = net.layers()[l].bias().len();
        for idx in 0..nw + nb {
            for c in 0..T::COMPONENTS {
                let analytic = if idx < nw {
                    grads[l].weights.data()[idx].component(c)
                } else {
                    grads[l].bias[idx - nw].component(c)
                };
                let probe = |delta: f64| -> Result<f64> {
                    let mut p = net.clone();
                    let layer = &mut p.layers_mut()[l];
                    let v = if idx < nw {
                        &mut layer.weights_mut().data_mut()[idx]
                    } else {
                        &mut layer.bias_mut()[idx - nw]
                    };
                    *v = v.with_component(c, v.component(c) + delta);
                    loss(&p)
                };
                let fd = (probe(h)? - probe(-h)?) / (2.0 * h);
                worst = worst.max(rel(analytic, fd));
            }
        }
    }
    Ok(worst)
}
