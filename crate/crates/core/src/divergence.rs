//! f-divergences over finite distributions and the per-unit Hellinger
//! divergence between factorized Bernoulli posteriors.

use ndarray::ArrayView1;

use crate::{DenseMatrix, Error, Result};

/// Per-unit Bernoulli means `μ_j = Q(H_j = 1)` of a factorized posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliProfile(Vec<f64>);

impl BernoulliProfile {
    pub fn new(means: Vec<f64>) -> Result<Self> {
        if means.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::InvalidArgument(
                "Bernoulli means must lie in [0, 1]".into(),
            ));
        }
        Ok(Self(means))
    }

    /// Caller guarantees every entry is in `[0, 1]`, e.g. sigmoid outputs.
    pub(crate) fn from_probs(means: Vec<f64>) -> Self {
        debug_assert!(means.iter().all(|m| (0.0..=1.0).contains(m)));
        Self(means)
    }

    pub fn means(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for BernoulliProfile {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A probability vector: non-negative entries summing to one (±1e-9).
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDistribution(Vec<f64>);

impl FiniteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidArgument(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized(sum));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Convex generator `f` with `f(1) = 0`.
///
/// `slope_at_infinity` is `lim_{t→∞} f(t)/t`, which gives the contribution
/// `p·slope` of outcomes with `q_z = 0`.
#[derive(Clone, Copy)]
pub struct Generator {
    pub f: fn(f64) -> f64,
    pub slope_at_infinity: f64,
}

impl Generator {
    /// `f(t) = 1 − √t`
    pub const HELLINGER: Generator = Generator {
        f: |t| 1.0 - t.sqrt(),
        slope_at_infinity: 0.0,
    };

    /// `f(t) = t ln t`
    pub const KULLBACK_LEIBLER: Generator = Generator {
        f: |t| if t == 0.0 { 0.0 } else { t * t.ln() },
        slope_at_infinity: f64::INFINITY,
    };
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dims("divergence operands", a, b));
    }
    Ok(())
}

/// `Σ_z q_z f(p_z / q_z)`.
pub fn f_divergence(
    generator: Generator,
    p: &FiniteDistribution,
    q: &FiniteDistribution,
) -> Result<f64> {
    check_lengths(p.len(), q.len())?;
    if (generator.f)(1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument("generator must satisfy f(1) = 0".into()));
    }
    let total = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&pz, &qz)| match (pz, qz) {
            (_, q) if q > 0.0 => q * (generator.f)(pz / q),
            (p, _) if p > 0.0 => p * generator.slope_at_infinity,
            _ => 0.0,
        })
        .sum();
    Ok(total)
}

/// `1 − Σ_z √(p_z q_z)`.
pub fn hellinger(p: &FiniteDistribution, q: &FiniteDistribution) -> Result<f64> {
    check_lengths(p.len(), q.len())?;
    Ok(1.0 - bhattacharyya_coefficient(p.probs(), q.probs()))
}

fn bhattacharyya_coefficient(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum()
}

/// `−ln Σ_z √(p_z q_z)`; disjoint supports give `f64::INFINITY`.
pub fn bhattacharyya(p: &FiniteDistribution, q: &FiniteDistribution) -> Result<f64> {
    check_lengths(p.len(), q.len())?;
    let bc = bhattacharyya_coefficient(p.probs(), q.probs());
    if bc <= 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(-bc.ln())
    }
}

/// Hellinger divergence between two Bernoulli factors with means `mu_p`, `mu_q`.
#[inline]
pub fn hellinger_unit(mu_p: f64, mu_q: f64) -> f64 {
    // Equal means are exactly zero; the clamp guards rounding elsewhere.
    if mu_p == mu_q {
        return 0.0;
    }
    (1.0 - ((1.0 - mu_p) * (1.0 - mu_q)).sqrt() - (mu_p * mu_q).sqrt()).max(0.0)
}

/// Sum of [`hellinger_unit`] over hidden units.
pub fn hellinger_total(p: &BernoulliProfile, q: &BernoulliProfile) -> Result<f64> {
    check_lengths(p.len(), q.len())?;
    Ok(hellinger_sum(p.means(), q.means()))
}

pub(crate) fn hellinger_sum(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| hellinger_unit(a, b)).sum()
}

/// Coefficients `(c_p, c_q)` such that `∂D_H/∂θ_ij = x_{p,i}·c_p[j] + x_{q,i}·c_q[j]`,
/// without the leading ½.
///
/// `c_p = √(μ̄_p μ̄_q)·μ_p − √(μ_p μ_q)·μ̄_p`, symmetric for `c_q`.
#[inline]
pub(crate) fn pair_coefficients(mu_p: f64, mu_q: f64) -> (f64, f64) {
    if mu_p == mu_q {
        return (0.0, 0.0);
    }
    let off = ((1.0 - mu_p) * (1.0 - mu_q)).sqrt();
    let on = (mu_p * mu_q).sqrt();
    (off * mu_p - on * (1.0 - mu_p), off * mu_q - on * (1.0 - mu_q))
}

/// Gradient of [`hellinger_total`] with respect to the weights `θ_ij`, where
/// `mu_p` and `mu_q` are the posteriors `σ(Σ_i θ_ij x_i + b_j)` of `x_p`, `x_q`.
///
/// Keeps the explicit ½. Trainers use twice this value (the ½ folded into α).
pub fn hellinger_grad_pair(
    x_p: ArrayView1<f64>,
    x_q: ArrayView1<f64>,
    mu_p: &BernoulliProfile,
    mu_q: &BernoulliProfile,
) -> Result<DenseMatrix> {
    check_lengths(x_p.len(), x_q.len())?;
    check_lengths(mu_p.len(), mu_q.len())?;
    let (n_v, n_h) = (x_p.len(), mu_p.len());
    let coeffs: Vec<(f64, f64)> = mu_p
        .means()
        .iter()
        .zip(mu_q.means())
        .map(|(&a, &b)| pair_coefficients(a, b))
        .collect();
    Ok(DenseMatrix::from_shape_fn((n_v, n_h), |(i, j)| {
        let (cp, cq) = coeffs[j];
        0.5 * (cp * x_p[i] + cq * x_q[i])
    }))
}
