//! Offline superposition memory.
//!
//! `K` weight matrices `W_k` (each `N x M`) share one block
//! `W = Σ_k W_k C_k^-1`. Reading model `k` back binds the block with `C_k`:
//! `W C_k = W_k + Σ_{s≠k} W_s C_s^-1 C_k`, so applying it to `x` yields the
//! stored output plus a residual `ε = Σ_{s≠k} W_s (C_s^-1 C_k x)`.
//!
//! The memory keeps only the summed block. [`StoredModelLedger`] keeps plain
//! copies next to it so the residual can be computed term by term.

use crate::context::{Bindable, ByteReader, ContextKey, Family, FORMAT_VERSION};
use crate::error::{mismatch, PspError, Result};
use crate::linalg::{matvec, require_positive, Matrix};

const MEMORY_MAGIC: &[u8; 4] = b"PSPM";

#[derive(Debug, Clone, PartialEq)]
pub struct SuperposedMemory<T> {
    family: Family,
    inputs: usize,
    outputs: usize,
    count: usize,
    weights: Matrix<T>,
}

impl<T: Bindable> SuperposedMemory<T> {
    /// Empty memory for `outputs x inputs` models.
    ///
    /// Binary and rotational memories are real (`T = f64`); complex and
    /// one-power memories are complex (`T = Complex64`).
    pub fn new(family: Family, outputs: usize, inputs: usize) -> Result<Self> {
        require_positive(outputs)?;
        require_positive(inputs)?;
        if family == Family::Standard {
            return Err(PspError::InvalidArgument(
                "a superposed memory needs a binding family".into(),
            ));
        }
        if family.is_complex() != (T::COMPONENTS == 2) {
            return Err(PspError::InvalidArgument(format!(
                "{family} memories use {} weights",
                if family.is_complex() { "complex" } else { "real" }
            )));
        }
        Ok(Self {
            family,
            inputs,
            outputs,
            count: 0,
            weights: Matrix::zeros(outputs, inputs),
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Number of stored models.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    fn check_key(&self, key: &ContextKey) -> Result<()> {
        if key.family() != self.family {
            return Err(PspError::FamilyMismatch(
                self.family.to_string(),
                key.family().to_string(),
            ));
        }
        if key.dim() != self.inputs {
            return Err(mismatch("memory key", self.inputs, key.dim()));
        }
        Ok(())
    }

    /// `W <- W + W_k C_k^-1`.
    pub fn store(&mut self, model: &Matrix<T>, key: &ContextKey) -> Result<()> {
        self.check_key(key)?;
        if model.shape() != (self.outputs, self.inputs) {
            return Err(mismatch(
                "store",
                format!("{}x{}", self.outputs, self.inputs),
                format!("{}x{}", model.rows(), model.cols()),
            ));
        }
        let bound = key.right_mul(model, true)?;
        self.weights.axpy(T::ONE, &bound)?;
        self.count += 1;
        Ok(())
    }

    /// `Ŵ_k = W C_k`.
    pub fn retrieve(&self, key: &ContextKey) -> Result<Matrix<T>> {
        self.check_key(key)?;
        key.right_mul(&self.weights, false)
    }

    /// `W (C_k x)`, without materializing `Ŵ_k`.
    pub fn retrieve_apply(&self, key: &ContextKey, x: &[T]) -> Result<Vec<T>> {
        self.check_key(key)?;
        matvec(&self.weights, &key.apply(x)?)
    }

    /// Checkpoint: `"PSPM"`, version, family tag, `M`, `N`, `K` (u64 LE), then
    /// `W` row-major as f64 LE (re/im pairs for complex memories).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(30 + self.weights.data().len() * 8 * T::COMPONENTS);
        out.extend_from_slice(MEMORY_MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.family.tag());
        for v in [self.inputs, self.outputs, self.count] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &w in self.weights.data() {
            for c in 0..T::COMPONENTS {
                out.extend_from_slice(&w.component(c).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MEMORY_MAGIC {
            return Err(PspError::Format("bad memory magic".into()));
        }
        if r.u8()? != FORMAT_VERSION {
            return Err(PspError::Format("unsupported memory version".into()));
        }
        let family = Family::from_tag(r.u8()?)?;
        let inputs = r.len_u64()?;
        let outputs = r.len_u64()?;
        let count = r.len_u64()?;
        let mut mem = Self::new(family, outputs, inputs)
            .map_err(|e| PspError::Format(e.to_string()))?;
        let n = inputs
            .checked_mul(outputs)
            .and_then(|n| n.checked_mul(T::COMPONENTS))
            .ok_or_else(|| PspError::Format("dimension overflow".into()))?;
        let raw = r.f64s(n)?;
        r.finish()?;
        for (w, chunk) in mem
            .weights
            .data_mut()
            .iter_mut()
            .zip(raw.chunks_exact(T::COMPONENTS))
        {
            for (c, &v) in chunk.iter().enumerate() {
                *w = w.with_component(c, v);
            }
        }
        mem.count = count;
        Ok(mem)
    }
}

/// Plain copies of every stored `(W_k, C_k)` pair.
#[derive(Debug, Clone, Default)]
pub struct StoredModelLedger<T> {
    entries: Vec<(Matrix<T>, ContextKey)>,
}

impl<T: Bindable> StoredModelLedger<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn record(&mut self, model: Matrix<T>, key: ContextKey) {
        self.entries.push((model, key));
    }

    /// Stores the model in `memory` and records it here.
    pub fn store_into(
        &mut self,
        memory: &mut SuperposedMemory<T>,
        model: Matrix<T>,
        key: ContextKey,
    ) -> Result<()> {
        memory.store(&model, &key)?;
        self.record(model, key);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(Matrix<T>, ContextKey)] {
        &self.entries
    }

    /// `(W_k x, ε)` with `ε = Σ_{s≠k} W_s (C_s^-1 C_k x)` summed explicitly.
    pub fn residual(&self, key: &ContextKey, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let k = self
            .entries
            .iter()
            .position(|(_, stored)| stored == key)
            .ok_or(PspError::KeyNotStored)?;
        let (model, _) = &self.entries[k];
        let signal = matvec(model, x)?;
        let bound = key.apply(x)?;
        let mut eps = vec![T::ZERO; model.rows()];
        for (s, (other, other_key)) in self.entries.iter().enumerate() {
            if s == k {
                continue;
            }
            let term = matvec(other, &other_key.apply_inverse(&bound)?)?;
            eps.iter_mut().zip(term).for_each(|(e, t)| *e += t);
        }
        Ok((signal, eps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{lift, norm, ComplexMatrix, RealMatrix, SeededRng};
    use num_complex::Complex64;

    fn gaussian_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> RealMatrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gaussian())
    }

    /// Rows all parallel to `x`: `W = a x̂ᵀ`.
    fn aligned_model(rows: usize, x: &[f64], rng: &mut SeededRng) -> RealMatrix {
        let nx = norm(x);
        let a = rng.gaussian_vec(rows);
        Matrix::from_fn(rows, x.len(), |i, j| a[i] * x[j] / nx)
    }

    fn key_for(family: Family, m: usize, rng: &mut SeededRng) -> ContextKey {
        match family {
            Family::Binary => ContextKey::gen_binary(m, rng).unwrap(),
            Family::Complex => ContextKey::gen_complex(m, rng).unwrap(),
            Family::Rotational => ContextKey::gen_rotational(m, rng).unwrap(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn identity_key_stores_verbatim() {
        let mut rng = SeededRng::new(1);
        let w = gaussian_matrix(3, 5, &mut rng);
        for fam in [Family::Binary, Family::Rotational] {
            let mut mem = SuperposedMemory::<f64>::new(fam, 3, 5).unwrap();
            mem.store(&w, &ContextKey::identity(fam, 5).unwrap()).unwrap();
            assert_eq!(mem.weights(), &w);
            assert_eq!(mem.count(), 1);
        }
    }

    #[test]
    fn single_model_round_trips() {
        let mut rng = SeededRng::new(2);
        for fam in [Family::Binary, Family::Rotational] {
            let w = gaussian_matrix(4, 6, &mut rng);
            let key = key_for(fam, 6, &mut rng);
            let mut mem = SuperposedMemory::new(fam, 4, 6).unwrap();
            mem.store(&w, &key).unwrap();
            assert!(mem.retrieve(&key).unwrap().max_abs_diff(&w) < 1e-12);
            let x = rng.gaussian_vec(6);
            let y = mem.retrieve_apply(&key, &x).unwrap();
            let want = w.matvec(&x).unwrap();
            assert!(y.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let w = gaussian_matrix(4, 6, &mut rng).to_complex();
        let key = ContextKey::gen_complex(6, &mut rng).unwrap();
        let mut mem = SuperposedMemory::<Complex64>::new(Family::Complex, 4, 6).unwrap();
        mem.store(&w, &key).unwrap();
        assert!(mem.retrieve(&key).unwrap().max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn rejects_mismatches() {
        let mut rng = SeededRng::new(3);
        let mut mem = SuperposedMemory::<f64>::new(Family::Binary, 2, 4).unwrap();
        let good = ContextKey::gen_binary(4, &mut rng).unwrap();
        assert!(mem.store(&RealMatrix::zeros(2, 3), &good).is_err());
        assert!(mem
            .store(&RealMatrix::zeros(2, 4), &ContextKey::gen_binary(5, &mut rng).unwrap())
            .is_err());
        assert!(matches!(
            mem.store(&RealMatrix::zeros(2, 4), &ContextKey::gen_complex(4, &mut rng).unwrap()),
            Err(PspError::FamilyMismatch(..))
        ));
        assert_eq!(mem.count(), 0);
        assert!(SuperposedMemory::<f64>::new(Family::Complex, 2, 2).is_err());
        assert!(SuperposedMemory::<Complex64>::new(Family::Binary, 2, 2).is_err());
        assert!(SuperposedMemory::<f64>::new(Family::Standard, 2, 2).is_err());
    }

    #[test]
    fn retrieve_apply_is_associative() {
        let mut rng = SeededRng::new(4);
        let (n, m) = (16, 16);
        let mut mem = SuperposedMemory::<Complex64>::new(Family::Complex, n, m).unwrap();
        let keys: Vec<_> = (0..3).map(|_| ContextKey::gen_complex(m, &mut rng).unwrap()).collect();
        for key in &keys {
            mem.store(&gaussian_matrix(n, m, &mut rng).to_complex(), key).unwrap();
        }
        let x = lift(&rng.gaussian_vec(m));
        let direct = mem.retrieve_apply(&keys[1], &x).unwrap();
        let via_matrix = mem.retrieve(&keys[1]).unwrap().matvec(&x).unwrap();
        let via_bind = mem.weights().matvec(&keys[1].apply(&x).unwrap()).unwrap();
        for i in 0..n {
            assert!((direct[i] - via_matrix[i]).norm() < 1e-12);
            assert!((direct[i] - via_bind[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn residual_hand_sized_binary() {
        // M = 4, N = 1, two models; ε computed by hand from the definition.
        let w1 = RealMatrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w2 = RealMatrix::from_vec(1, 4, vec![0.5, -1.0, 2.0, 1.0]).unwrap();
        let b1 = ContextKey::Binary { signs: vec![1, -1, 1, -1] };
        let b2 = ContextKey::Binary { signs: vec![1, 1, -1, -1] };
        let mut mem = SuperposedMemory::new(Family::Binary, 1, 4).unwrap();
        let mut ledger = StoredModelLedger::new();
        ledger.store_into(&mut mem, w1, b1.clone()).unwrap();
        ledger.store_into(&mut mem, w2, b2).unwrap();
        let x = [1.0, 1.0, 2.0, -1.0];
        let (signal, eps) = ledger.residual(&b1, &x).unwrap();
        // W1 x = 1 + 2 + 6 - 4 = 5
        assert_eq!(signal, vec![5.0]);
        // b2 ⊙ b1 = (1, -1, -1, 1); ⊙ x = (1, -1, -2, -1); w2 · that = 0.5 + 1 - 4 - 1
        assert_eq!(eps, vec![-3.5]);
        let y = mem.retrieve_apply(&b1, &x).unwrap();
        assert!((y[0] - (signal[0] + eps[0])).abs() < 1e-12);
    }

    #[test]
    fn single_model_has_zero_residual() {
        let mut rng = SeededRng::new(5);
        let key = ContextKey::gen_binary(8, &mut rng).unwrap();
        let mut ledger = StoredModelLedger::new();
        ledger.record(gaussian_matrix(3, 8, &mut rng), key.clone());
        let (_, eps) = ledger.residual(&key, &rng.gaussian_vec(8)).unwrap();
        assert_eq!(eps, vec![0.0; 3]);
        let other = ContextKey::gen_binary(8, &mut rng).unwrap();
        assert!(matches!(
            ledger.residual(&other, &[0.0; 8]),
            Err(PspError::KeyNotStored)
        ));
    }

    #[test]
    fn decomposition_identity_large() {
        let mut rng = SeededRng::new(6);
        let (n, m, k) = (8, 256, 16);
        for fam in [Family::Binary, Family::Rotational] {
            let mut mem = SuperposedMemory::new(fam, n, m).unwrap();
            let mut ledger = StoredModelLedger::new();
            for _ in 0..k {
                let key = key_for(fam, m, &mut rng);
                ledger.store_into(&mut mem, gaussian_matrix(n, m, &mut rng), key).unwrap();
            }
            let x = rng.gaussian_vec(m);
            for (_, key) in ledger.entries() {
                let (signal, eps) = ledger.residual(key, &x).unwrap();
                let y = mem.retrieve_apply(key, &x).unwrap();
                for i in 0..n {
                    assert!((y[i] - signal[i] - eps[i]).abs() < 1e-10);
                }
            }
        }
        let mut mem = SuperposedMemory::<Complex64>::new(Family::Complex, n, m).unwrap();
        let mut ledger = StoredModelLedger::new();
        for _ in 0..k {
            let key = ContextKey::gen_complex(m, &mut rng).unwrap();
            ledger
                .store_into(&mut mem, gaussian_matrix(n, m, &mut rng).to_complex(), key)
                .unwrap();
        }
        let x = lift(&rng.gaussian_vec(m));
        for (_, key) in ledger.entries() {
            let (signal, eps) = ledger.residual(key, &x).unwrap();
            let y = mem.retrieve_apply(key, &x).unwrap();
            for i in 0..n {
                assert!((y[i] - signal[i] - eps[i]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn two_binary_models_interference_matches_ledger() {
        // Column sign flips preserve Frobenius norms, so the retrieved matrix
        // is off by exactly |W2|_F. The 1/sqrt(M) attenuation shows up in the
        // output W1 x for inputs aligned with the model rows.
        let (n, m) = (4, 1024);
        let mut ratios = Vec::new();
        for seed in 0..100 {
            let mut rng = SeededRng::new(seed);
            let x = rng.gaussian_vec(m);
            let w1 = aligned_model(n, &x, &mut rng);
            let w2 = aligned_model(n, &x, &mut rng);
            let (k1, k2) = (
                ContextKey::gen_binary(m, &mut rng).unwrap(),
                ContextKey::gen_binary(m, &mut rng).unwrap(),
            );
            let mut mem = SuperposedMemory::new(Family::Binary, n, m).unwrap();
            let mut ledger = StoredModelLedger::new();
            ledger.store_into(&mut mem, w1.clone(), k1.clone()).unwrap();
            ledger.store_into(&mut mem, w2.clone(), k2).unwrap();

            let mut diff = mem.retrieve(&k1).unwrap();
            diff.axpy(-1.0, &w1).unwrap();
            assert!((diff.frobenius_norm() - w2.frobenius_norm()).abs() < 1e-9);

            let (signal, eps) = ledger.residual(&k1, &x).unwrap();
            let measured = norm(&eps) / norm(&signal);
            let predicted = norm(&w2.matvec(&x).unwrap()) / (norm(&signal) * (m as f64).sqrt());
            ratios.push(measured / predicted);
        }
        // E|<x̂, b⊙x>|^2 = Σ x̂_i^2 x_i^2 ≈ 3|x|^2/M for Gaussian x, so the
        // ratio is ≈ sqrt(3) in RMS; require the RMS within a factor of 2 of that.
        let rms = (ratios.iter().map(|r| r * r).sum::<f64>() / ratios.len() as f64).sqrt();
        let expected = 3f64.sqrt();
        assert!(rms > expected / 2.0 && rms < expected * 2.0, "rms ratio {rms}");
    }

    #[test]
    fn foreign_key_reads_noise_of_order_sqrt_k_over_m() {
        let (n, m, k) = (4, 512, 6);
        let mut acc = 0.0;
        let trials = 100;
        for seed in 0..trials {
            let mut rng = SeededRng::new(1000 + seed);
            let x: Vec<f64> = (0..m).map(|_| rng.sign() as f64).collect();
            let mut mem = SuperposedMemory::new(Family::Binary, n, m).unwrap();
            let mut signal = 0.0;
            for _ in 0..k {
                let w = aligned_model(n, &x, &mut rng);
                signal += norm(&w.matvec(&x).unwrap()).powi(2);
                mem.store(&w, &ContextKey::gen_binary(m, &mut rng).unwrap()).unwrap();
            }
            let stranger = ContextKey::gen_binary(m, &mut rng).unwrap();
            let y = mem.retrieve_apply(&stranger, &x).unwrap();
            acc += norm(&y).powi(2) / (signal / k as f64);
        }
        let rms = (acc / trials as f64).sqrt();
        let expected = (k as f64 / m as f64).sqrt();
        assert!(rms > expected / 2.0 && rms < expected * 2.0, "{rms} vs {expected}");
    }

    #[test]
    fn rotational_retrieve_preserves_frobenius_norm() {
        let mut rng = SeededRng::new(7);
        let mut mem = SuperposedMemory::new(Family::Rotational, 5, 9).unwrap();
        for _ in 0..3 {
            let key = ContextKey::gen_rotational(9, &mut rng).unwrap();
            mem.store(&gaussian_matrix(5, 9, &mut rng), &key).unwrap();
        }
        let key = ContextKey::gen_rotational(9, &mut rng).unwrap();
        let r = mem.retrieve(&key).unwrap();
        assert!((r.frobenius_norm() - mem.weights().frobenius_norm()).abs() < 1e-10);
    }

    #[test]
    fn complex_retrieve_apply_error_scales_with_sqrt_k_minus_1_over_m() {
        let (n, m, k) = (4, 512, 8);
        let trials = 200;
        let mut acc = 0.0;
        for seed in 0..trials {
            let mut rng = SeededRng::new(5000 + seed);
            let xr = rng.gaussian_vec(m);
            let x = lift(&xr);
            let mut mem = SuperposedMemory::<Complex64>::new(Family::Complex, n, m).unwrap();
            let mut first = None;
            for i in 0..k {
                let w: ComplexMatrix = aligned_model(n, &xr, &mut rng).to_complex();
                let key = ContextKey::gen_complex(m, &mut rng).unwrap();
                mem.store(&w, &key).unwrap();
                if i == 0 {
                    first = Some((w, key));
                }
            }
            let (w, key) = first.unwrap();
            let want = w.matvec(&x).unwrap();
            let got = mem.retrieve_apply(&key, &x).unwrap();
            let err: f64 = got.iter().zip(&want).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
            acc += err / norm(&want);
        }
        let mean = acc / trials as f64;
        let scale = ((k - 1) as f64 / m as f64).sqrt();
        assert!(mean < 3.0 * scale && mean > scale / 3.0, "{mean} vs {scale}");
    }

    #[test]
    fn storing_adds_frobenius_energy_on_average() {
        let (n, m) = (4, 64);
        let trials = 2000;
        let mut rng = SeededRng::new(8);
        let mut samples = Vec::with_capacity(trials);
        for _ in 0..trials {
            let mut mem = SuperposedMemory::new(Family::Binary, n, m).unwrap();
            mem.store(&gaussian_matrix(n, m, &mut rng), &ContextKey::gen_binary(m, &mut rng).unwrap())
                .unwrap();
            let before = mem.weights().frobenius_norm().powi(2);
            let wk = gaussian_matrix(n, m, &mut rng);
            mem.store(&wk, &ContextKey::gen_binary(m, &mut rng).unwrap()).unwrap();
            let after = mem.weights().frobenius_norm().powi(2);
            samples.push(after - before - wk.frobenius_norm().powi(2));
        }
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        assert!(mean.abs() < 4.0 * (var / trials as f64).sqrt());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = SeededRng::new(9);
        let mut mem = SuperposedMemory::<Complex64>::new(Family::OnePower, 3, 4).unwrap();
        let base: std::sync::Arc<[f64]> = (0..4).map(|_| rng.angle()).collect::<Vec<_>>().into();
        for k in 1..3 {
            let key = ContextKey::gen_onepower(base.clone(), k).unwrap();
            mem.store(&gaussian_matrix(3, 4, &mut rng).to_complex(), &key).unwrap();
        }
        let bytes = mem.to_bytes();
        assert_eq!(bytes.len(), 4 + 2 + 24 + 3 * 4 * 16);
        assert_eq!(SuperposedMemory::<Complex64>::from_bytes(&bytes).unwrap(), mem);
        assert!(SuperposedMemory::<Complex64>::from_bytes(&bytes[..40]).is_err());
        assert!(SuperposedMemory::<f64>::from_bytes(&bytes).is_err());
    }
}
