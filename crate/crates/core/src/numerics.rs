//! Elementwise math, the seeded RNG contract and the finite-difference oracle.
//!
//! All arithmetic is `f64`. Matrices are row-major [`ndarray`] arrays.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

pub type DenseMatrix = Array2<f64>;
pub type DenseVector = Array1<f64>;

/// Inputs to [`sigmoid`] are clamped to this magnitude before exponentiation.
pub const SIGMOID_CLAMP: f64 = 30.0;

/// Default step for [`finite_diff_grad`].
pub const FD_EPS: f64 = 1e-5;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `ln σ(z)`, exact for large |z| (not clamped).
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

pub fn sigmoid_in_place<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) {
    a.mapv_inplace(sigmoid);
}

/// Numerically stable `ln Σ exp(v)`.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Central-difference gradient of `f` at `params`.
///
/// Coordinate `i` is `(f(θ + eps·e_i) − f(θ − eps·e_i)) / (2·eps)`.
pub fn finite_diff_grad<F>(mut f: F, params: &DenseVector, eps: f64) -> Result<DenseVector>
where
    F: FnMut(&DenseVector) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let mut probe = params.clone();
    let mut grad = DenseVector::zeros(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad objective"));
        }
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vectors are (numerically) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Seeded random stream.
///
/// Backed by ChaCha8 (`rand_chacha`), seeded through `seed_from_u64`, which is
/// platform independent. Independent streams for workers are selected with the
/// ChaCha stream id, so `(seed, stream)` fully determines the draws.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Splits off a child generator; advances `self` by one draw.
    pub fn fork(&mut self) -> RngState {
        let seed = self.inner.next_u64();
        RngState::new(seed)
    }

    /// Draws a fresh seed. Pair it with [`RngState::with_stream`] to hand one
    /// stream to each worker.
    pub fn next_seed(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> f64 {
        if self.uniform() < p {
            1.0
        } else {
            0.0
        }
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> DenseMatrix {
        DenseMatrix::from_shape_simple_fn((rows, cols), || std * self.normal())
    }
}
