//! Task context keys and the per-layer registry that hands them out.
//!
//! A key `C_k` is either diagonal (binary signs, complex phases, or integer
//! powers of one shared phase vector) or a dense orthogonal matrix. Phases are
//! stored as raw angles so that composition is exact angle addition; they are
//! wrapped into `[-π, π)` only when a key is realized as complex numbers.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, PspError, Result};
use crate::linalg::{
    gemm, matvec, require_positive, sample_haar_orthogonal, Matrix, Op, RealMatrix, Scalar,
    SeededRng,
};

/// Binding family of a superposed layer or memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// No binding: one plain model.
    Standard,
    Binary,
    Complex,
    OnePower,
    Rotational,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Standard,
        Family::Binary,
        Family::Complex,
        Family::OnePower,
        Family::Rotational,
    ];
    pub const BOUND: [Family; 4] = [
        Family::Binary,
        Family::Complex,
        Family::OnePower,
        Family::Rotational,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Standard => "standard",
            Family::Binary => "binary",
            Family::Complex => "complex",
            Family::OnePower => "onepower",
            Family::Rotational => "rotational",
        }
    }

    /// Whether weights of this family live in the complex field.
    pub fn is_complex(self) -> bool {
        matches!(self, Family::Complex | Family::OnePower)
    }

    pub fn tag(self) -> u8 {
        match self {
            Family::Standard => 0,
            Family::Binary => 1,
            Family::Complex => 2,
            Family::OnePower => 3,
            Family::Rotational => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.tag() == tag)
            .ok_or_else(|| PspError::Format(format!("unknown family tag {tag}")))
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = PspError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(Family::Standard),
            "binary" => Ok(Family::Binary),
            "complex" => Ok(Family::Complex),
            "onepower" | "one-power" => Ok(Family::OnePower),
            "rotational" | "rotation" => Ok(Family::Rotational),
            other => Err(PspError::UnknownFamily(other.to_string())),
        }
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(phi: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = phi - two_pi * ((phi + PI) / two_pi).floor();
    // Rounding can land exactly on +π.
    if w >= PI {
        w - two_pi
    } else {
        w
    }
}

/// A task key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ContextKey {
    Binary { signs: Vec<i8> },
    #[serde(rename = "complex")]
    ComplexPhase { phases: Vec<f64> },
    #[serde(rename = "onepower")]
    OnePower { base: Arc<[f64]>, exponent: i64 },
    Rotational { matrix: RealMatrix },
}

impl ContextKey {
    pub fn gen_binary(m: usize, rng: &mut SeededRng) -> Result<Self> {
        require_positive(m)?;
        Ok(ContextKey::Binary {
            signs: (0..m).map(|_| rng.sign()).collect(),
        })
    }

    pub fn gen_complex(m: usize, rng: &mut SeededRng) -> Result<Self> {
        require_positive(m)?;
        Ok(ContextKey::ComplexPhase {
            phases: (0..m).map(|_| rng.angle()).collect(),
        })
    }

    /// `c_j = exp(i φ_j k)`.
    pub fn gen_onepower(base: Arc<[f64]>, exponent: i64) -> Result<Self> {
        require_positive(base.len())?;
        if base.iter().any(|p| !p.is_finite()) {
            return Err(PspError::InvalidArgument("non-finite base phase".into()));
        }
        Ok(ContextKey::OnePower { base, exponent })
    }

    pub fn gen_rotational(m: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(ContextKey::Rotational {
            matrix: sample_haar_orthogonal(m, rng)?,
        })
    }

    /// Key that leaves every vector unchanged, in the given family.
    pub fn identity(family: Family, m: usize) -> Result<Self> {
        require_positive(m)?;
        match family {
            Family::Binary => Ok(ContextKey::Binary { signs: vec![1; m] }),
            Family::Complex => Ok(ContextKey::ComplexPhase {
                phases: vec![0.0; m],
            }),
            Family::OnePower => Ok(ContextKey::OnePower {
                base: vec![0.0; m].into(),
                exponent: 0,
            }),
            Family::Rotational => Ok(ContextKey::Rotational {
                matrix: RealMatrix::identity(m),
            }),
            Family::Standard => Err(PspError::InvalidArgument(
                "standard layers carry no context key".into(),
            )),
        }
    }

    /// Mixture of three neighbouring phase sets: `exp(i (φ_prev + φ_cur + φ_next) / 3)`.
    ///
    /// The raw angles are averaged as written; no circular-mean correction is
    /// applied, so inputs straddling the ±π branch cut mix discontinuously.
    pub fn mixture(prev: &[f64], cur: &[f64], next: &[f64]) -> Result<Self> {
        if prev.len() != cur.len() || next.len() != cur.len() {
            return Err(mismatch(
                "mixture",
                cur.len(),
                format!("{} / {}", prev.len(), next.len()),
            ));
        }
        require_positive(cur.len())?;
        if prev.iter().chain(cur).chain(next).any(|p| !p.is_finite()) {
            return Err(PspError::InvalidArgument("non-finite phase".into()));
        }
        Ok(ContextKey::ComplexPhase {
            phases: prev
                .iter()
                .zip(cur)
                .zip(next)
                .map(|((a, b), c)| (a + b + c) / 3.0)
                .collect(),
        })
    }

    pub fn family(&self) -> Family {
        match self {
            ContextKey::Binary { .. } => Family::Binary,
            ContextKey::ComplexPhase { .. } => Family::Complex,
            ContextKey::OnePower { .. } => Family::OnePower,
            ContextKey::Rotational { .. } => Family::Rotational,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ContextKey::Binary { signs } => signs.len(),
            ContextKey::ComplexPhase { phases } => phases.len(),
            ContextKey::OnePower { base, .. } => base.len(),
            ContextKey::Rotational { matrix } => matrix.rows(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        !matches!(self, ContextKey::Rotational { .. })
    }

    /// Phase angles of a diagonal key (binary signs map to `{0, π}`), unwrapped.
    pub fn phases(&self) -> Option<Vec<f64>> {
        match self {
            ContextKey::Binary { signs } => Some(
                signs
                    .iter()
                    .map(|&s| if s > 0 { 0.0 } else { PI })
                    .collect(),
            ),
            ContextKey::ComplexPhase { phases } => Some(phases.clone()),
            ContextKey::OnePower { base, exponent } => {
                Some(base.iter().map(|&p| p * *exponent as f64).collect())
            }
            ContextKey::Rotational { .. } => None,
        }
    }

    /// Diagonal entries as complex numbers, or `None` for rotational keys.
    pub fn realize(&self) -> Option<Vec<Complex64>> {
        match self {
            ContextKey::Binary { signs } => Some(
                signs
                    .iter()
                    .map(|&s| Complex64::new(s as f64, 0.0))
                    .collect(),
            ),
            ContextKey::ComplexPhase { phases } => Some(
                phases
                    .iter()
                    .map(|&p| Complex64::from_polar(1.0, wrap_angle(p)))
                    .collect(),
            ),
            ContextKey::OnePower { base, exponent } => Some(
                base.iter()
                    .map(|&p| Complex64::from_polar(1.0, wrap_angle(p * *exponent as f64)))
                    .collect(),
            ),
            ContextKey::Rotational { .. } => None,
        }
    }

    /// Dense `C` (diagonal keys become `diag(c)`).
    pub fn to_matrix(&self) -> Matrix<Complex64> {
        match self {
            ContextKey::Rotational { matrix } => matrix.to_complex(),
            _ => Matrix::diag(&self.realize().expect("diagonal key")),
        }
    }

    pub fn invert(&self) -> ContextKey {
        match self {
            ContextKey::Binary { .. } => self.clone(),
            ContextKey::ComplexPhase { phases } => ContextKey::ComplexPhase {
                phases: phases.iter().map(|p| -p).collect(),
            },
            ContextKey::OnePower { base, exponent } => ContextKey::OnePower {
                base: base.clone(),
                exponent: -exponent,
            },
            ContextKey::Rotational { matrix } => ContextKey::Rotational {
                matrix: matrix.transpose(),
            },
        }
    }

    /// Key whose action is `a` after `b`.
    pub fn compose(a: &ContextKey, b: &ContextKey) -> Result<ContextKey> {
        if a.dim() != b.dim() {
            return Err(mismatch("compose", a.dim(), b.dim()));
        }
        match (a, b) {
            (ContextKey::Binary { signs: x }, ContextKey::Binary { signs: y }) => {
                Ok(ContextKey::Binary {
                    signs: x.iter().zip(y).map(|(p, q)| p * q).collect(),
                })
            }
            (ContextKey::ComplexPhase { phases: x }, ContextKey::ComplexPhase { phases: y }) => {
                Ok(ContextKey::ComplexPhase {
                    phases: x.iter().zip(y).map(|(p, q)| p + q).collect(),
                })
            }
            (
                ContextKey::OnePower {
                    base: ba,
                    exponent: ka,
                },
                ContextKey::OnePower {
                    base: bb,
                    exponent: kb,
                },
            ) => {
                if ba != bb {
                    return Err(PspError::InvalidArgument(
                        "one-power keys with different bases do not compose".into(),
                    ));
                }
                Ok(ContextKey::OnePower {
                    base: ba.clone(),
                    exponent: ka + kb,
                })
            }
            (ContextKey::Rotational { matrix: x }, ContextKey::Rotational { matrix: y }) => {
                Ok(ContextKey::Rotational {
                    matrix: x.matmul(y)?,
                })
            }
            _ => Err(PspError::FamilyMismatch(
                a.family().to_string(),
                b.family().to_string(),
            )),
        }
    }

    /// `C x`. Complex-phase keys need a complex `x`; see [`Bindable`].
    pub fn apply<T: Bindable>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim() {
            return Err(mismatch("apply", self.dim(), x.len()));
        }
        match self {
            ContextKey::Rotational { matrix } => {
                let c = T::lift_matrix(matrix);
                matvec(&c, x)
            }
            _ => {
                let d = T::diagonal(self)?;
                Ok(x.iter().zip(&d).map(|(&a, &b)| a * b).collect())
            }
        }
    }

    /// `C^-1 x`.
    pub fn apply_inverse<T: Bindable>(&self, x: &[T]) -> Result<Vec<T>> {
        self.invert().apply(x)
    }

    /// `A C` (or `A C^-1` when `inverse`), where `A` has `dim` columns.
    pub fn right_mul<T: Bindable>(&self, a: &Matrix<T>, inverse: bool) -> Result<Matrix<T>> {
        if a.cols() != self.dim() {
            return Err(mismatch("right_mul", self.dim(), a.cols()));
        }
        match self {
            ContextKey::Rotational { matrix } => {
                let c = T::lift_matrix(matrix);
                let mut out = Matrix::zeros(a.rows(), a.cols());
                let op = if inverse { Op::T } else { Op::N };
                gemm(T::ONE, a, Op::N, &c, op, T::ZERO, &mut out)?;
                Ok(out)
            }
            _ => {
                let mut d = T::diagonal(self)?;
                if inverse {
                    d.iter_mut().for_each(|v| *v = v.conj());
                }
                let mut out = a.clone();
                out.scale_columns(&d)?;
                Ok(out)
            }
        }
    }

    /// Binds every row of a batch: row `b` becomes `C x_b`.
    pub fn bind_rows<T: Bindable>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        // Row form of C x is x^T C^T; C^T = C^-1 for rotations, C^T = C for diagonals.
        self.right_mul(x, !self.is_diagonal())
    }

    /// Unbinds every row of a batch: row `b` becomes `C^-1 x_b`.
    pub fn unbind_rows<T: Bindable>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.right_mul(x, self.is_diagonal())
    }

    /// Checks the family invariants (signs, orthogonality, finiteness).
    pub fn validate(&self) -> Result<()> {
        require_positive(self.dim())?;
        match self {
            ContextKey::Binary { signs } => {
                if signs.iter().any(|&s| s != 1 && s != -1) {
                    return Err(PspError::InvalidArgument("binary key entry not ±1".into()));
                }
            }
            ContextKey::ComplexPhase { phases } => {
                if phases.iter().any(|p| !p.is_finite()) {
                    return Err(PspError::InvalidArgument("non-finite phase".into()));
                }
            }
            ContextKey::OnePower { base, .. } => {
                if base.iter().any(|p| !p.is_finite()) {
                    return Err(PspError::InvalidArgument("non-finite phase".into()));
                }
            }
            ContextKey::Rotational { matrix } => {
                if matrix.rows() != matrix.cols() {
                    return Err(mismatch("rotational key (square)", matrix.rows(), matrix.cols()));
                }
                let err = matrix
                    .transpose()
                    .matmul(matrix)?
                    .max_abs_diff(&RealMatrix::identity(matrix.rows()));
                if err > 1e-10 {
                    return Err(PspError::InvalidArgument(format!(
                        "rotational key is not orthogonal (max |CᵀC - I| = {err:e})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Binary form: `"PSPK"`, version byte, family tag, `M` as u64 LE, payload.
    ///
    /// Payloads: binary signs as one byte each (`0x01` / `0xFF`); complex
    /// phases as f64 LE; one-power exponent as i64 LE then the base as f64 LE;
    /// rotational matrix row-major f64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(KEY_MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.family().tag());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        match self {
            ContextKey::Binary { signs } => out.extend(signs.iter().map(|&s| s as u8)),
            ContextKey::ComplexPhase { phases } => {
                phases.iter().for_each(|p| out.extend_from_slice(&p.to_le_bytes()))
            }
            ContextKey::OnePower { base, exponent } => {
                out.extend_from_slice(&exponent.to_le_bytes());
                base.iter().for_each(|p| out.extend_from_slice(&p.to_le_bytes()));
            }
            ContextKey::Rotational { matrix } => matrix
                .data()
                .iter()
                .for_each(|p| out.extend_from_slice(&p.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != KEY_MAGIC {
            return Err(PspError::Format("bad key magic".into()));
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(PspError::Format(format!("unsupported key version {version}")));
        }
        let family = Family::from_tag(r.u8()?)?;
        let m = r.len_u64()?;
        let key = match family {
            Family::Binary => ContextKey::Binary {
                signs: r.take(m)?.iter().map(|&b| b as i8).collect(),
            },
            Family::Complex => ContextKey::ComplexPhase {
                phases: r.f64s(m)?,
            },
            Family::OnePower => {
                let exponent = r.i64()?;
                ContextKey::OnePower {
                    base: r.f64s(m)?.into(),
                    exponent,
                }
            }
            Family::Rotational => {
                let n = m
                    .checked_mul(m)
                    .ok_or_else(|| PspError::Format("dimension overflow".into()))?;
                ContextKey::Rotational {
                    matrix: RealMatrix::from_vec(m, m, r.f64s(n)?)?,
                }
            }
            Family::Standard => return Err(PspError::Format("standard has no key".into())),
        };
        r.finish()?;
        key.validate()?;
        Ok(key)
    }
}

pub(crate) const KEY_MAGIC: &[u8; 4] = b"PSPK";
pub const FORMAT_VERSION: u8 = 1;

/// Little-endian cursor shared by the binary formats.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| PspError::Format("truncated payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| PspError::Format("dimension overflow".into()))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| PspError::Format("dimension overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(PspError::Format("trailing bytes".into()));
        }
        Ok(())
    }
}

/// Field a key can act on.
///
/// Binary and rotational keys act on real or complex vectors; complex-phase
/// and one-power keys only on complex ones (lift real inputs first).
pub trait Bindable: Scalar {
    /// Realized diagonal of a diagonal key in this field.
    fn diagonal(key: &ContextKey) -> Result<Vec<Self>>;
    fn lift_matrix(m: &RealMatrix) -> Matrix<Self>;
}

impl Bindable for f64 {
    fn diagonal(key: &ContextKey) -> Result<Vec<f64>> {
        match key {
            ContextKey::Binary { signs } => Ok(signs.iter().map(|&s| s as f64).collect()),
            ContextKey::Rotational { .. } => {
                Err(PspError::InvalidArgument("rotational key is not diagonal".into()))
            }
            other => Err(PspError::RealBindingUnsupported {
                family: other.family().to_string(),
            }),
        }
    }

    fn lift_matrix(m: &RealMatrix) -> RealMatrix {
        m.clone()
    }
}

impl Bindable for Complex64 {
    fn diagonal(key: &ContextKey) -> Result<Vec<Complex64>> {
        key.realize()
            .ok_or_else(|| PspError::InvalidArgument("rotational key is not diagonal".into()))
    }

    fn lift_matrix(m: &RealMatrix) -> Matrix<Complex64> {
        m.to_complex()
    }
}

/// Parameter cost of superposing `K` models of an `M x N` linear map.
///
/// Returns `(total, per_new_model)` where `total` is the cost of the first
/// model plus `K - 1` increments. Complex weights count two reals each.
pub fn param_count(family: Family, m: u64, n: u64, k: u64) -> Result<(u64, u64)> {
    if m == 0 || n == 0 || k == 0 {
        return Err(PspError::ZeroDimension);
    }
    let (first, per_new) = match family {
        Family::Standard => (m * n, m * n),
        Family::Rotational => (m * (n + m), m * m),
        Family::Binary => (m * (n + 1), m),
        // 2M(N + 1/2)
        Family::Complex => (2 * m * n + m, m),
        Family::OnePower => (2 * m * n + m, 1),
    };
    Ok((first + (k - 1) * per_new, per_new))
}

/// Per-task keys of one layer, all of one family and dimension.
///
/// One-power registries draw a single base phase vector at construction and
/// hand out exponent `task + 1` for each task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextRegistry {
    family: Family,
    dim: usize,
    base: Option<Arc<[f64]>>,
    keys: BTreeMap<usize, ContextKey>,
}

impl ContextRegistry {
    pub fn new(family: Family, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        require_positive(dim)?;
        if family == Family::Standard {
            return Err(PspError::InvalidArgument(
                "standard layers carry no context registry".into(),
            ));
        }
        let base = (family == Family::OnePower)
            .then(|| (0..dim).map(|_| rng.angle()).collect::<Vec<_>>().into());
        Ok(Self {
            family,
            dim,
            base,
            keys: BTreeMap::new(),
        })
    }

    /// Rebuilds a registry from a saved base and key set.
    pub fn restore(
        family: Family,
        dim: usize,
        base: Option<Arc<[f64]>>,
        keys: impl IntoIterator<Item = (usize, ContextKey)>,
    ) -> Result<Self> {
        require_positive(dim)?;
        if family == Family::Standard {
            return Err(PspError::InvalidArgument(
                "standard layers carry no context registry".into(),
            ));
        }
        match &base {
            Some(b) if family != Family::OnePower || b.len() != dim => {
                return Err(PspError::InvalidArgument("unexpected registry base".into()))
            }
            None if family == Family::OnePower => {
                return Err(PspError::InvalidArgument("one-power registry needs a base".into()))
            }
            _ => {}
        }
        let mut reg = Self {
            family,
            dim,
            base,
            keys: BTreeMap::new(),
        };
        for (task, key) in keys {
            key.validate()?;
            reg.insert(task, key)?;
        }
        Ok(reg)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.keys.keys().copied()
    }

    pub fn base(&self) -> Option<&Arc<[f64]>> {
        self.base.as_ref()
    }

    /// Key for `task`, drawing a fresh one on first use.
    pub fn register(&mut self, task: usize, rng: &mut SeededRng) -> Result<&ContextKey> {
        if !self.keys.contains_key(&task) {
            let key = match self.family {
                Family::Binary => ContextKey::gen_binary(self.dim, rng)?,
                Family::Complex => ContextKey::gen_complex(self.dim, rng)?,
                Family::OnePower => {
                    let base = self.base.clone().expect("one-power registry has a base");
                    ContextKey::gen_onepower(base, task as i64 + 1)?
                }
                Family::Rotational => ContextKey::gen_rotational(self.dim, rng)?,
                Family::Standard => unreachable!("rejected in new"),
            };
            self.keys.insert(task, key);
        }
        Ok(&self.keys[&task])
    }

    /// Installs an explicitly constructed key.
    pub fn insert(&mut self, task: usize, key: ContextKey) -> Result<()> {
        if key.dim() != self.dim {
            return Err(mismatch("ContextRegistry::insert", self.dim, key.dim()));
        }
        if key.family() != self.family {
            return Err(PspError::FamilyMismatch(
                self.family.to_string(),
                key.family().to_string(),
            ));
        }
        if let (ContextKey::OnePower { base, .. }, Some(own)) = (&key, &self.base) {
            if base != own {
                return Err(PspError::InvalidArgument(
                    "one-power key does not share the registry base".into(),
                ));
            }
        }
        self.keys.insert(task, key);
        Ok(())
    }

    pub fn key(&self, task: usize) -> Result<&ContextKey> {
        self.keys.get(&task).ok_or(PspError::UnknownTask(task))
    }

    /// Scalars needed to store the keys (Table-1 style accounting).
    pub fn stored_scalars(&self) -> usize {
        match self.family {
            Family::OnePower => self.dim + self.keys.len(),
            Family::Rotational => self.keys.len() * self.dim * self.dim,
            _ => self.keys.len() * self.dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::lift;

    fn close(a: &[Complex64], b: &[Complex64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).norm() < tol)
    }

    fn random_complex(m: usize, rng: &mut SeededRng) -> Vec<Complex64> {
        (0..m).map(|_| Complex64::new(rng.gaussian(), rng.gaussian())).collect()
    }

    #[test]
    fn binary_key_is_reproducible_and_self_inverse() {
        let a = ContextKey::gen_binary(4, &mut SeededRng::new(9)).unwrap();
        let b = ContextKey::gen_binary(4, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        let ContextKey::Binary { signs } = &a else { panic!() };
        assert!(signs.iter().all(|&s| s == 1 || s == -1));
        let d = f64::diagonal(&a).unwrap();
        assert!(d.iter().zip(&d).all(|(x, y)| x * y == 1.0));
        assert_eq!(a.invert(), a);
    }

    #[test]
    fn binary_sign_mean_is_centered() {
        // Sum of M fair signs has sd sqrt(M); the mean is within 4/sqrt(M).
        let m = 10_000;
        let key = ContextKey::gen_binary(m, &mut SeededRng::new(21)).unwrap();
        let d = f64::diagonal(&key).unwrap();
        let mean = d.iter().sum::<f64>() / m as f64;
        assert!(mean.abs() < 4.0 / (m as f64).sqrt());
    }

    #[test]
    fn complex_key_on_unit_circle_and_centered() {
        let m = 10_000;
        let key = ContextKey::gen_complex(m, &mut SeededRng::new(4)).unwrap();
        let c = key.realize().unwrap();
        assert!(c.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
        let mean = c.iter().sum::<Complex64>() / m as f64;
        assert!(mean.norm() < 4.0 / (m as f64).sqrt());
        let id = ContextKey::compose(&key, &key.invert()).unwrap();
        assert!(id.realize().unwrap().iter().all(|z| (z - 1.0).norm() < 1e-12));
    }

    #[test]
    fn onepower_exponent_rules() {
        let mut rng = SeededRng::new(5);
        let base: Arc<[f64]> = (0..32).map(|_| rng.angle()).collect::<Vec<_>>().into();
        let zero = ContextKey::gen_onepower(base.clone(), 0).unwrap();
        assert!(zero.realize().unwrap().iter().all(|z| (z - 1.0).norm() == 0.0));

        let one = ContextKey::gen_onepower(base.clone(), 1).unwrap();
        let as_complex = ContextKey::ComplexPhase {
            phases: base.to_vec(),
        };
        assert_eq!(one.realize(), as_complex.realize());

        for (a, b) in [(3, 4), (-7, 2), (11, -11), (50, 13)] {
            let ka = ContextKey::gen_onepower(base.clone(), a).unwrap();
            let kb = ContextKey::gen_onepower(base.clone(), b).unwrap();
            let kab = ContextKey::gen_onepower(base.clone(), a + b).unwrap();
            // Direct phase-addition oracle: exp(iφ a) * exp(iφ b).
            let prod: Vec<Complex64> = ka
                .realize()
                .unwrap()
                .iter()
                .zip(kb.realize().unwrap())
                .map(|(x, y)| x * y)
                .collect();
            assert!(close(&prod, &kab.realize().unwrap(), 1e-12));
            assert_eq!(ContextKey::compose(&ka, &kb).unwrap(), kab);
        }
    }

    #[test]
    fn invert_round_trips_every_family() {
        let mut rng = SeededRng::new(8);
        let m = 8;
        let keys = [
            ContextKey::gen_binary(m, &mut rng).unwrap(),
            ContextKey::gen_complex(m, &mut rng).unwrap(),
            ContextKey::gen_onepower((0..m).map(|_| rng.angle()).collect::<Vec<_>>().into(), 3)
                .unwrap(),
            ContextKey::gen_rotational(m, &mut rng).unwrap(),
        ];
        for key in &keys {
            let x = random_complex(m, &mut rng);
            let back = key.apply_inverse(&key.apply(&x).unwrap()).unwrap();
            assert!(close(&back, &x, 1e-10), "{}", key.family());
        }
        let ContextKey::ComplexPhase { phases } = &keys[1] else { panic!() };
        let ContextKey::ComplexPhase { phases: neg } = keys[1].invert() else { panic!() };
        assert!(phases.iter().zip(&neg).all(|(a, b)| *a == -*b));
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = SeededRng::new(13);
        let m = 64;
        let a = ContextKey::gen_complex(m, &mut rng).unwrap();
        let b = ContextKey::gen_complex(m, &mut rng).unwrap();
        let c = ContextKey::gen_complex(m, &mut rng).unwrap();
        let x = random_complex(m, &mut rng);
        let ab = ContextKey::compose(&a, &b).unwrap();
        let seq = a.apply(&b.apply(&x).unwrap()).unwrap();
        assert!(close(&ab.apply(&x).unwrap(), &seq, 1e-10));
        let left = ContextKey::compose(&a, &ContextKey::compose(&b, &c).unwrap()).unwrap();
        let right = ContextKey::compose(&ContextKey::compose(&a, &b).unwrap(), &c).unwrap();
        assert!(close(&left.apply(&x).unwrap(), &right.apply(&x).unwrap(), 1e-10));

        let ra = ContextKey::gen_rotational(6, &mut rng).unwrap();
        let rb = ContextKey::gen_rotational(6, &mut rng).unwrap();
        let xr = rng.gaussian_vec(6);
        let seq = ra.apply(&rb.apply(&xr).unwrap()).unwrap();
        let comp = ContextKey::compose(&ra, &rb).unwrap().apply(&xr).unwrap();
        assert!(seq.iter().zip(&comp).all(|(p, q)| (p - q).abs() < 1e-10));

        let ba = ContextKey::gen_binary(5, &mut rng).unwrap();
        let bb = ContextKey::gen_binary(5, &mut rng).unwrap();
        let (ContextKey::Binary { signs: sa }, ContextKey::Binary { signs: sb }) = (&ba, &bb) else {
            panic!()
        };
        let ContextKey::Binary { signs: sc } = ContextKey::compose(&ba, &bb).unwrap() else {
            panic!()
        };
        assert!((0..5).all(|i| sc[i] == sa[i] * sb[i]));
        assert_eq!(
            ContextKey::compose(&ba, &ba.invert()).unwrap(),
            ContextKey::identity(Family::Binary, 5).unwrap()
        );
    }

    #[test]
    fn compose_rejects_mismatches() {
        let mut rng = SeededRng::new(1);
        let b = ContextKey::gen_binary(4, &mut rng).unwrap();
        let c = ContextKey::gen_complex(4, &mut rng).unwrap();
        let c5 = ContextKey::gen_complex(5, &mut rng).unwrap();
        assert!(matches!(
            ContextKey::compose(&b, &c),
            Err(PspError::FamilyMismatch(..))
        ));
        assert!(matches!(
            ContextKey::compose(&c, &c5),
            Err(PspError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mixture_arithmetic() {
        let phi = [0.1, -2.0, 3.0];
        let mix = ContextKey::mixture(&phi, &phi, &phi).unwrap();
        let base: Arc<[f64]> = phi.to_vec().into();
        let one = ContextKey::gen_onepower(base, 1).unwrap();
        assert!(close(&mix.realize().unwrap(), &one.realize().unwrap(), 1e-15));

        let z = [0.0; 2];
        let ContextKey::ComplexPhase { phases } =
            ContextKey::mixture(&z, &z, &[PI, PI]).unwrap()
        else {
            panic!()
        };
        assert!(phases.iter().all(|&p| (p - PI / 3.0).abs() < 1e-15));
        assert!(ContextKey::mixture(&z, &z, &[0.0]).is_err());
    }

    #[test]
    fn mixture_keeps_neighbours_correlated() {
        let mut rng = SeededRng::new(17);
        let m = 128;
        let draws = 1000;
        let (mut mix_acc, mut rand_acc) = (0.0, 0.0);
        for _ in 0..draws {
            let prev: Vec<f64> = (0..m).map(|_| rng.angle()).collect();
            let cur: Vec<f64> = (0..m).map(|_| rng.angle()).collect();
            let next: Vec<f64> = (0..m).map(|_| rng.angle()).collect();
            let c_cur = ContextKey::ComplexPhase { phases: cur.clone() }.realize().unwrap();
            let c_mix = ContextKey::mixture(&prev, &cur, &next).unwrap().realize().unwrap();
            let c_rand = ContextKey::gen_complex(m, &mut rng).unwrap().realize().unwrap();
            let ip = |a: &[Complex64]| {
                a.iter().zip(&c_cur).map(|(x, y)| x * y.conj()).sum::<Complex64>().norm() / m as f64
            };
            mix_acc += ip(&c_mix);
            rand_acc += ip(&c_rand);
        }
        assert!(mix_acc / draws as f64 > rand_acc / draws as f64);
    }

    #[test]
    fn apply_basics() {
        let mut rng = SeededRng::new(2);
        let x = rng.gaussian_vec(10);
        for fam in Family::BOUND {
            let id = ContextKey::identity(fam, 10).unwrap();
            let lx = lift(&x);
            assert!(close(&id.apply(&lx).unwrap(), &lx, 1e-15));
        }
        let b = ContextKey::gen_binary(10, &mut rng).unwrap();
        let y = b.apply(&x).unwrap();
        assert!(y.iter().zip(&x).all(|(p, q)| p.abs() == q.abs()));
        let r = ContextKey::gen_rotational(10, &mut rng).unwrap();
        let y = r.apply(&x).unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((norm(&y) - norm(&x)).abs() < 1e-10);

        let c = ContextKey::gen_complex(10, &mut rng).unwrap();
        assert!(matches!(
            c.apply(&x),
            Err(PspError::RealBindingUnsupported { .. })
        ));
        assert!(b.apply(&x[..9]).is_err());
    }

    #[test]
    fn binary_is_complex_with_phases_zero_or_pi() {
        let mut rng = SeededRng::new(31);
        let b = ContextKey::gen_binary(16, &mut rng).unwrap();
        let as_phase = ContextKey::ComplexPhase {
            phases: b.phases().unwrap(),
        };
        let x = random_complex(16, &mut rng);
        assert!(close(&b.apply(&x).unwrap(), &as_phase.apply(&x).unwrap(), 1e-15));
    }

    #[test]
    fn row_binding_matches_vector_binding() {
        let mut rng = SeededRng::new(3);
        for key in [
            ContextKey::gen_binary(5, &mut rng).unwrap(),
            ContextKey::gen_complex(5, &mut rng).unwrap(),
            ContextKey::gen_rotational(5, &mut rng).unwrap(),
        ] {
            let x = Matrix::from_fn(3, 5, |_, _| Complex64::new(rng.gaussian(), rng.gaussian()));
            let bound = key.bind_rows(&x).unwrap();
            let unbound = key.unbind_rows(&bound).unwrap();
            for i in 0..3 {
                assert!(close(bound.row(i), &key.apply(x.row(i)).unwrap(), 1e-12));
            }
            assert!(unbound.max_abs_diff(&x) < 1e-12);
        }
    }

    #[test]
    fn param_count_table() {
        let (m, n) = (256, 784);
        assert_eq!(param_count(Family::Standard, m, n, 1).unwrap(), (m * n, m * n));
        assert_eq!(param_count(Family::Binary, m, n, 1).unwrap(), (m * (n + 1), m));
        assert_eq!(param_count(Family::Binary, m, n, 3).unwrap().0, m * (n + 1) + 2 * m);
        assert_eq!(param_count(Family::Complex, m, n, 1).unwrap(), (2 * m * n + m, m));
        assert_eq!(param_count(Family::OnePower, m, n, 1).unwrap().1, 1);
        assert_eq!(param_count(Family::Rotational, 64, 64, 2).unwrap(), (64 * 128 + 64 * 64, 64 * 64));
        assert!(param_count(Family::Binary, 0, 1, 1).is_err());
        assert!("hexagonal".parse::<Family>().is_err());
    }

    #[test]
    fn registry_semantics() {
        let mut rng = SeededRng::new(6);
        let mut reg = ContextRegistry::new(Family::OnePower, 12, &mut rng).unwrap();
        for t in 0..5 {
            reg.register(t, &mut rng).unwrap();
        }
        assert_eq!(reg.stored_scalars(), 12 + 5);
        let ContextKey::OnePower { exponent, base } = reg.key(3).unwrap() else { panic!() };
        assert_eq!(*exponent, 4);
        assert!(Arc::ptr_eq(base, reg.base().unwrap()));
        assert!(matches!(reg.key(99), Err(PspError::UnknownTask(99))));

        let mut bin = ContextRegistry::new(Family::Binary, 4, &mut rng).unwrap();
        let first = bin.register(0, &mut rng).unwrap().clone();
        assert_eq!(bin.register(0, &mut rng).unwrap(), &first);
        assert!(bin.insert(1, ContextKey::gen_complex(4, &mut rng).unwrap()).is_err());
        assert!(ContextRegistry::new(Family::Standard, 4, &mut rng).is_err());
    }

    #[test]
    fn byte_format_round_trip_and_errors() {
        let mut rng = SeededRng::new(10);
        for key in [
            ContextKey::gen_binary(7, &mut rng).unwrap(),
            ContextKey::gen_complex(7, &mut rng).unwrap(),
            ContextKey::gen_onepower((0..7).map(|_| rng.angle()).collect::<Vec<_>>().into(), -3)
                .unwrap(),
            ContextKey::gen_rotational(7, &mut rng).unwrap(),
        ] {
            let bytes = key.to_bytes();
            assert_eq!(&bytes[..4], b"PSPK");
            assert_eq!(ContextKey::from_bytes(&bytes).unwrap(), key);
            assert!(ContextKey::from_bytes(&bytes[..bytes.len() - 1]).is_err());
            let json = serde_json::to_string(&key).unwrap();
            assert_eq!(serde_json::from_str::<ContextKey>(&json).unwrap(), key);
        }
        let mut bad = ContextKey::gen_binary(3, &mut rng).unwrap().to_bytes();
        bad[14] = 7;
        assert!(ContextKey::from_bytes(&bad).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        for &p in &[0.0, PI, -PI, 3.0 * PI, -7.5, 1e6, -1e-300] {
            let w = wrap_angle(p);
            assert!((-PI..PI).contains(&w), "{p} -> {w}");
            assert!(((w - p) / (2.0 * PI)).round() * 2.0 * PI - (w - p) < 1e-6);
        }
    }
}
