//! Monte-Carlo checks of the residual statistics.
//!
//! Each suite holds `w` and `x` fixed per `(family, M)` and draws a fresh key
//! per trial. Trial `t` uses child stream `t` of a per-configuration stream,
//! and sums are compensated, so a report depends only on the seed.
//!
//! Reports carry their own [`Rule`], so the pass flag can be recomputed from
//! the serialized numbers alone.

use std::fmt::Write as _;

use num_complex::Complex64;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::context::{ContextKey, Family};
use crate::error::{PspError, Result};
use crate::linalg::{
    lift, norm, sample_haar_orthogonal, HouseholderHaar, RealMatrix, SeededRng,
};
use crate::superposition::StoredModelLedger;

/// Tolerance rule attached to a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    /// `|estimate - reference| <= multiple * standard_error`.
    WithinSe { multiple: f64 },
    /// `lo <= estimate / reference <= hi`.
    RatioBand { lo: f64, hi: f64 },
    /// `|estimate - reference| <= tol`.
    AbsDiff { tol: f64 },
}

impl Rule {
    pub fn check(&self, estimate: f64, standard_error: f64, reference: f64) -> bool {
        match *self {
            Rule::WithinSe { multiple } => (estimate - reference).abs() <= multiple * standard_error,
            Rule::RatioBand { lo, hi } => {
                let r = estimate / reference;
                r >= lo && r <= hi
            }
            Rule::AbsDiff { tol } => (estimate - reference).abs() <= tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub suite: String,
    pub family: Family,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub trials: usize,
    pub statistic: String,
    pub estimate: f64,
    pub standard_error: f64,
    pub reference: f64,
    #[serde(flatten)]
    pub rule: Rule,
    pub pass: bool,
    /// `|<w, x>| / (|w| |x|)` of the fixed probe pair.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eta: Option<f64>,
}

impl TrialReport {
    #[allow(clippy::too_many_arguments)]
    fn new(
        suite: &str,
        family: Family,
        m: usize,
        k: usize,
        trials: usize,
        statistic: &str,
        estimate: f64,
        standard_error: f64,
        reference: f64,
        rule: Rule,
    ) -> Self {
        Self {
            suite: suite.into(),
            family,
            m,
            k,
            trials,
            statistic: statistic.into(),
            estimate,
            standard_error,
            reference,
            rule,
            pass: rule.check(estimate, standard_error, reference),
            eta: None,
        }
    }

    /// Pass flag recomputed from the stored numbers.
    pub fn recompute_pass(&self) -> bool {
        self.rule.check(self.estimate, self.standard_error, self.reference)
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sample mean and standard error of the mean.
fn mean_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mut s = CompensatedSum::default();
    samples.iter().for_each(|&x| s.add(x));
    let mean = s.value() / n;
    let mut v = CompensatedSum::default();
    samples.iter().for_each(|&x| v.add((x - mean) * (x - mean)));
    let var = if samples.len() > 1 { v.value() / (n - 1.0) } else { 0.0 };
    (mean, (var / n).sqrt())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(PspError::InvalidArgument(
            "slope needs at least two matching points".into(),
        ));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(PspError::InvalidArgument("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(PspError::InvalidArgument("slope needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

fn family_stream(rng: &SeededRng, family: Family, m: usize) -> SeededRng {
    rng.child(((family.tag() as u64) << 32) ^ m as u64)
}

fn eta(w: &[f64], x: &[f64]) -> f64 {
    let d: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
    let denom = norm(w) * norm(x);
    if denom == 0.0 {
        0.0
    } else {
        d.abs() / denom
    }
}

fn check_suite_family(family: Family) -> Result<()> {
    match family {
        Family::Binary | Family::Complex | Family::Rotational => Ok(()),
        other => Err(PspError::InvalidArgument(format!(
            "the statistics suites cover binary, complex and rotational keys, not {other}"
        ))),
    }
}

/// `<C w, x>` for one random key. Complex results keep both components.
fn bound_inner(family: Family, w: &[f64], x: &[f64], rng: &mut SeededRng) -> Result<Complex64> {
    let m = w.len();
    Ok(match family {
        Family::Binary => {
            let key = ContextKey::gen_binary(m, rng)?;
            let bw = key.apply(w)?;
            Complex64::new(bw.iter().zip(x).map(|(a, b)| a * b).sum(), 0.0)
        }
        Family::Complex => {
            let key = ContextKey::gen_complex(m, rng)?;
            let bw = key.apply(&lift(w))?;
            bw.iter().zip(x).map(|(a, b)| a * b).sum()
        }
        Family::Rotational => {
            let c = HouseholderHaar::sample(m, rng)?;
            let bw = c.apply(w)?;
            Complex64::new(bw.iter().zip(x).map(|(a, b)| a * b).sum(), 0.0)
        }
        other => return Err(PspError::InvalidArgument(format!("no suite for {other}"))),
    })
}

/// Mean of `<C w, x>` over random keys, for a fixed Gaussian `w`, `x`.
///
/// Complex keys give two reports, one per component.
pub fn bias_suite(
    families: &[Family],
    m: usize,
    trials: usize,
    rng: &mut SeededRng,
) -> Result<Vec<TrialReport>> {
    let root = SeededRng::new(rng.next_u64());
    let mut out = Vec::new();
    for &family in families {
        check_suite_family(family)?;
        let mut stream = family_stream(&root, family, m);
        let w = stream.gaussian_vec(m);
        let x = stream.gaussian_vec(m);
        out.extend(bias_with(family, &w, &x, trials, &stream)?);
    }
    Ok(out)
}

/// Bias suite for caller-supplied probe vectors.
pub fn bias_with(
    family: Family,
    w: &[f64],
    x: &[f64],
    trials: usize,
    stream: &SeededRng,
) -> Result<Vec<TrialReport>> {
    check_suite_family(family)?;
    if trials < 1000 {
        return Err(PspError::InvalidArgument("the bias suite needs at least 1000 trials".into()));
    }
    if w.len() != x.len() || w.is_empty() {
        return Err(PspError::InvalidArgument("probe vectors must share a positive length".into()));
    }
    let m = w.len();
    let mut re = Vec::with_capacity(trials);
    let mut im = Vec::with_capacity(trials);
    for t in 0..trials {
        let z = bound_inner(family, w, x, &mut stream.child(t as u64))?;
        re.push(z.re);
        im.push(z.im);
    }
    let rule = Rule::WithinSe { multiple: 4.0 };
    let mut parts = vec![("mean_bound_inner", re)];
    if family == Family::Complex {
        parts[0].0 = "mean_bound_inner_re";
        parts.push(("mean_bound_inner_im", im));
    }
    Ok(parts
        .into_iter()
        .map(|(name, samples)| {
            let (mean, se) = mean_se(&samples);
            let mut r = TrialReport::new("bias", family, m, 1, trials, name, mean, se, 0.0, rule);
            r.eta = Some(eta(w, x));
            r
        })
        .collect())
}

/// Normalized variance `Var<C w, x> / (|w|^2 |x|^2)` per family and `M`.
///
/// `w` is Gaussian. For binary and rotational keys `x` is Gaussian too; the
/// complex suite draws `x` with `±1` entries, which keeps every coordinate's
/// contribution `w_i^2 x_i^2` on the same scale as `|w|^2 |x|^2 / M^2` and
/// makes the exact value `1/M`.
pub fn variance_suite(
    families: &[Family],
    ms: &[usize],
    trials: usize,
    rng: &mut SeededRng,
) -> Result<Vec<TrialReport>> {
    if trials < 5000 {
        return Err(PspError::InvalidArgument(
            "the variance suite needs at least 5000 trials".into(),
        ));
    }
    let root = SeededRng::new(rng.next_u64());
    let mut out = Vec::new();
    for &family in families {
        check_suite_family(family)?;
        for &m in ms {
            if m < 16 {
                return Err(PspError::InvalidArgument("the variance suite needs M >= 16".into()));
            }
            let mut stream = family_stream(&root, family, m);
            let w = stream.gaussian_vec(m);
            let x: Vec<f64> = if family == Family::Complex {
                (0..m).map(|_| stream.sign() as f64).collect()
            } else {
                stream.gaussian_vec(m)
            };
            out.push(variance_with(family, &w, &x, trials, &stream)?);
        }
    }
    Ok(out)
}

/// Variance suite for caller-supplied probe vectors.
pub fn variance_with(
    family: Family,
    w: &[f64],
    x: &[f64],
    trials: usize,
    stream: &SeededRng,
) -> Result<TrialReport> {
    check_suite_family(family)?;
    if w.len() != x.len() || w.is_empty() {
        return Err(PspError::InvalidArgument("probe vectors must share a positive length".into()));
    }
    let m = w.len();
    let samples: Vec<Complex64> = (0..trials)
        .map(|t| bound_inner(family, w, x, &mut stream.child(t as u64)))
        .collect::<Result<_>>()?;
    let n = trials as f64;
    let (mut sre, mut sim) = (CompensatedSum::default(), CompensatedSum::default());
    for z in &samples {
        sre.add(z.re);
        sim.add(z.im);
    }
    let mean = Complex64::new(sre.value() / n, sim.value() / n);
    let dev: Vec<f64> = samples.iter().map(|z| (z - mean).norm_sqr()).collect();
    let (mean_dev, se_dev) = mean_se(&dev);
    let var = mean_dev * n / (n - 1.0);
    let scale = norm(w).powi(2) * norm(x).powi(2);
    let reference = match family {
        Family::Binary => w.iter().zip(x).map(|(a, b)| a * a * b * b).sum::<f64>() / scale,
        _ => 1.0 / m as f64,
    };
    let mut r = TrialReport::new(
        "variance",
        family,
        m,
        1,
        trials,
        "normalized_variance",
        var / scale,
        se_dev / scale,
        reference,
        Rule::RatioBand { lo: 0.75, hi: 1.25 },
    );
    r.eta = Some(eta(w, x));
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferencePoint {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub trials: usize,
    /// Root mean square of `|ε| / |W(k) x|` over trials.
    pub rms_relative_residual: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    /// `"M"` or `"K-1"`.
    pub against: String,
    /// The other coordinate, held fixed.
    pub fixed: usize,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceTable {
    pub family: Family,
    pub outputs: usize,
    pub points: Vec<InterferencePoint>,
    pub slopes: Vec<SlopeFit>,
}

impl InterferenceTable {
    pub fn point(&self, m: usize, k: usize) -> Option<&InterferencePoint> {
        self.points.iter().find(|p| p.m == m && p.k == k)
    }

    pub fn slope(&self, against: &str, fixed: usize) -> Option<f64> {
        self.slopes
            .iter()
            .find(|s| s.against == against && s.fixed == fixed)
            .map(|s| s.slope)
    }

    /// Slope checks against `-1/2` in `M` and `+1/2` in `K - 1`, within `tol`.
    pub fn reports(&self, tol: f64) -> Vec<TrialReport> {
        self.slopes
            .iter()
            .map(|s| {
                let (reference, m, k) = if s.against == "M" {
                    (-0.5, 0, s.fixed)
                } else {
                    (0.5, s.fixed, 0)
                };
                let trials = self.points.first().map_or(0, |p| p.trials);
                TrialReport::new(
                    "interference",
                    self.family,
                    m,
                    k,
                    trials,
                    &format!("loglog_slope_vs_{}", s.against),
                    s.slope,
                    0.0,
                    reference,
                    Rule::AbsDiff { tol },
                )
            })
            .collect()
    }
}

/// Number of model outputs used by [`interference_sweep`].
pub const SWEEP_OUTPUTS: usize = 16;

fn sweep_key(family: Family, m: usize, rng: &mut SeededRng) -> Result<ContextKey> {
    match family {
        Family::Binary => ContextKey::gen_binary(m, rng),
        Family::Complex => ContextKey::gen_complex(m, rng),
        Family::Rotational => ContextKey::gen_rotational(m, rng),
        other => Err(PspError::InvalidArgument(format!("no sweep for {other}"))),
    }
}

/// Relative residual of model 0 when `K` rank-one models are superposed.
///
/// Every model has rows parallel to the probe `x` (`η = 1`, the worst case for
/// interference) and Gaussian row scales, so all models carry comparable
/// energy. `x` has `±1` entries.
fn sweep_trial(family: Family, m: usize, k: usize, rng: &mut SeededRng) -> Result<f64> {
    let n = SWEEP_OUTPUTS;
    let x: Vec<f64> = (0..m).map(|_| rng.sign() as f64).collect();
    let nx = norm(&x);
    let xhat: Vec<f64> = x.iter().map(|v| v / nx).collect();
    let mut first = None;
    if family.is_complex() {
        let mut ledger = StoredModelLedger::<Complex64>::new();
        for _ in 0..k {
            let a = rng.gaussian_vec(n);
            let w = RealMatrix::from_fn(n, m, |i, j| a[i] * xhat[j]).to_complex();
            let key = sweep_key(family, m, rng)?;
            first.get_or_insert_with(|| key.clone());
            ledger.record(w, key);
        }
        let (signal, eps) = ledger.residual(first.as_ref().unwrap(), &lift(&x))?;
        Ok(norm(&eps) / norm(&signal))
    } else {
        let mut ledger = StoredModelLedger::<f64>::new();
        for _ in 0..k {
            let a = rng.gaussian_vec(n);
            let w = RealMatrix::from_fn(n, m, |i, j| a[i] * xhat[j]);
            let key = sweep_key(family, m, rng)?;
            first.get_or_insert_with(|| key.clone());
            ledger.record(w, key);
        }
        let (signal, eps) = ledger.residual(first.as_ref().unwrap(), &x)?;
        Ok(norm(&eps) / norm(&signal))
    }
}

/// Relative residual `|ε| / |W(k) x|` over the grid `ks x ms`, with log-log
/// slopes along every row and column that has at least two points.
///
/// Slopes in `K - 1` skip `K = 1`, whose residual is exactly zero.
pub fn interference_sweep(
    family: Family,
    ks: &[usize],
    ms: &[usize],
    trials: usize,
    rng: &mut SeededRng,
) -> Result<InterferenceTable> {
    if ks.is_empty() || ms.is_empty() || trials == 0 {
        return Err(PspError::InvalidArgument("empty sweep".into()));
    }
    if ks.contains(&0) || ms.contains(&0) {
        return Err(PspError::ZeroDimension);
    }
    let root = SeededRng::new(rng.next_u64());
    let mut points = Vec::new();
    for &m in ms {
        for &k in ks {
            let stream = family_stream(&root, family, m).child(k as u64);
            let sq: Vec<f64> = (0..trials)
                .map(|t| sweep_trial(family, m, k, &mut stream.child(t as u64)).map(|r| r * r))
                .collect::<Result<_>>()?;
            let (mean_sq, se_sq) = mean_se(&sq);
            let rms = mean_sq.sqrt();
            // Delta method: se(sqrt(u)) = se(u) / (2 sqrt(u)).
            let se = if rms > 0.0 { se_sq / (2.0 * rms) } else { 0.0 };
            points.push(InterferencePoint {
                m,
                k,
                trials,
                rms_relative_residual: rms,
                standard_error: se,
            });
        }
    }
    let mut slopes = Vec::new();
    for &k in ks {
        if k < 2 || ms.len() < 2 {
            continue;
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = points
            .iter()
            .filter(|p| p.k == k)
            .map(|p| (p.m as f64, p.rms_relative_residual))
            .unzip();
        slopes.push(SlopeFit {
            against: "M".into(),
            fixed: k,
            slope: loglog_slope(&xs, &ys)?,
        });
    }
    for &m in ms {
        let (xs, ys): (Vec<f64>, Vec<f64>) = points
            .iter()
            .filter(|p| p.m == m && p.k >= 2)
            .map(|p| ((p.k - 1) as f64, p.rms_relative_residual))
            .unzip();
        if xs.len() >= 2 {
            slopes.push(SlopeFit {
                against: "K-1".into(),
                fixed: m,
                slope: loglog_slope(&xs, &ys)?,
            });
        }
    }
    Ok(InterferenceTable {
        family,
        outputs: SWEEP_OUTPUTS,
        points,
        slopes,
    })
}

/// Jacobian of the read-out `ρ(w) = w C` for one row, as an `M x M` matrix.
fn readout_jacobian(key: &ContextKey) -> crate::linalg::ComplexMatrix {
    // Row-vector read-out w -> w C has Jacobian Cᵀ.
    key.to_matrix().transpose()
}

/// Maximum entry of `|J J^H - I|` for the read-out Jacobian of `samples`
/// random keys per family.
pub fn unitary_suite(
    families: &[Family],
    m: usize,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<Vec<TrialReport>> {
    if samples == 0 {
        return Err(PspError::InvalidArgument("unitary suite needs samples".into()));
    }
    let root = SeededRng::new(rng.next_u64());
    let mut out = Vec::new();
    for &family in families {
        let stream = family_stream(&root, family, m);
        let mut worst: f64 = 0.0;
        for s in 0..samples {
            let mut r = stream.child(s as u64);
            let key = match family {
                Family::Binary => ContextKey::gen_binary(m, &mut r)?,
                Family::Complex => ContextKey::gen_complex(m, &mut r)?,
                Family::OnePower => {
                    let base: Vec<f64> = (0..m).map(|_| r.angle()).collect();
                    let exponent = 1 + r.below(16) as i64;
                    ContextKey::gen_onepower(base.into(), exponent)?
                }
                Family::Rotational => ContextKey::Rotational {
                    matrix: sample_haar_orthogonal(m, &mut r)?,
                },
                Family::Standard => {
                    return Err(PspError::InvalidArgument("standard has no read-out key".into()))
                }
            };
            let j = readout_jacobian(&key);
            let jjh = j.matmul(&j.conj_transpose())?;
            worst = worst.max(jjh.max_abs_diff(&crate::linalg::ComplexMatrix::identity(m)));
        }
        out.push(TrialReport::new(
            "unitary",
            family,
            m,
            1,
            samples,
            "max_abs_deviation_from_identity",
            worst,
            0.0,
            0.0,
            Rule::AbsDiff { tol: 1e-10 },
        ));
    }
    Ok(out)
}

/// One line per report: header plus `suite,family,M,K,trials,statistic,...`.
pub fn reports_csv(reports: &[TrialReport]) -> String {
    let mut s = String::from(
        "suite,family,M,K,trials,statistic,estimate,standard_error,reference,pass\n",
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:e},{:e},{:e},{}",
            r.suite,
            r.family,
            r.m,
            r.k,
            r.trials,
            r.statistic,
            r.estimate,
            r.standard_error,
            r.reference,
            r.pass
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_beats_naive() {
        let mut s = CompensatedSum::default();
        s.add(1.0);
        for _ in 0..10 {
            s.add(1e-16);
        }
        s.add(-1.0);
        assert!((s.value() - 1e-15).abs() < 1e-30);
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() + 0.5).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_err());
        assert!(loglog_slope(&[1.0, 2.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn rules() {
        assert!(Rule::WithinSe { multiple: 4.0 }.check(0.0, 0.0, 0.0));
        assert!(!Rule::WithinSe { multiple: 4.0 }.check(0.5, 0.1, 0.0));
        assert!(Rule::RatioBand { lo: 0.75, hi: 1.25 }.check(1.2, 0.0, 1.0));
        assert!(!Rule::RatioBand { lo: 0.75, hi: 1.25 }.check(0.7, 0.0, 1.0));
        assert!(Rule::AbsDiff { tol: 0.1 }.check(-0.45, 0.0, -0.5));
    }

    #[test]
    fn zero_weight_has_exactly_zero_bias() {
        let stream = SeededRng::new(3);
        let x = SeededRng::new(4).gaussian_vec(32);
        for fam in [Family::Binary, Family::Complex, Family::Rotational] {
            for r in bias_with(fam, &[0.0; 32], &x, 1000, &stream).unwrap() {
                assert_eq!(r.estimate, 0.0);
                assert!(r.pass);
            }
        }
    }

    #[test]
    fn bias_reports_pass_at_small_m() {
        let reports =
            bias_suite(&[Family::Binary, Family::Complex, Family::Rotational], 32, 2000, &mut SeededRng::new(5))
                .unwrap();
        assert_eq!(reports.len(), 4);
        assert!(reports.iter().all(|r| r.pass && r.recompute_pass()), "{reports:?}");
    }

    #[test]
    fn variance_matches_exact_binary_value() {
        let reports = variance_suite(&[Family::Binary], &[32], 5000, &mut SeededRng::new(6)).unwrap();
        let r = &reports[0];
        assert!(r.pass, "{r:?}");
        assert!(bias_suite(&[Family::Binary], 32, 10, &mut SeededRng::new(6)).is_err());
        assert!(variance_suite(&[Family::Binary], &[8], 5000, &mut SeededRng::new(6)).is_err());
    }

    #[test]
    fn one_dimensional_rotation_has_variance_w_x_squared() {
        // O(1) = {±1}: <Cw, x> = ±wx, so the variance is exactly (wx)^2.
        let stream = SeededRng::new(11);
        let samples: Vec<f64> = (0..4000)
            .map(|t| bound_inner(Family::Rotational, &[1.5], &[-2.0], &mut stream.child(t)).unwrap().re)
            .collect();
        assert!(samples.iter().all(|&s| (s.abs() - 3.0).abs() < 1e-12));
        let r = variance_with(Family::Rotational, &[1.5], &[-2.0], 4000, &stream).unwrap();
        // Normalized by |w|^2 |x|^2 = 9, so the reference 1/M = 1 is exact.
        assert!((r.estimate - 1.0).abs() < 0.02);
    }

    #[test]
    fn single_model_sweep_has_zero_residual() {
        let t = interference_sweep(Family::Binary, &[1, 3], &[16, 64], 20, &mut SeededRng::new(7)).unwrap();
        assert_eq!(t.point(16, 1).unwrap().rms_relative_residual, 0.0);
        assert!(t.point(64, 3).unwrap().rms_relative_residual > 0.0);
        assert!(t.slope("M", 3).is_some());
        assert!(t.slope("M", 1).is_none());
        assert!(t.slope("K-1", 16).is_none());
    }

    #[test]
    fn unitary_deviation() {
        let fams = [Family::Binary, Family::Complex, Family::OnePower, Family::Rotational];
        let reports = unitary_suite(&fams, 24, 3, &mut SeededRng::new(8)).unwrap();
        assert_eq!(reports[0].estimate, 0.0);
        assert!(reports[1].estimate < 1e-12);
        assert!(reports.iter().all(|r| r.pass));
    }

    #[test]
    fn reports_are_deterministic() {
        let run = || {
            let mut rng = SeededRng::new(9);
            let mut r = bias_suite(&[Family::Complex], 16, 1000, &mut rng).unwrap();
            r.extend(unitary_suite(&[Family::Rotational], 8, 2, &mut rng).unwrap());
            serde_json::to_string(&r).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn report_json_round_trip_recomputes_pass() {
        let r = &bias_suite(&[Family::Binary], 16, 1000, &mut SeededRng::new(10)).unwrap()[0];
        let json = serde_json::to_string(r).unwrap();
        let back: TrialReport = serde_json::from_str(&json).unwrap();
        assert_eq!(&back, r);
        assert_eq!(back.recompute_pass(), back.pass);
        assert!(json.contains("\"rule\":\"within_se\""));
        let csv = reports_csv(std::slice::from_ref(r));
        assert_eq!(csv.lines().count(), 2);
    }
}
