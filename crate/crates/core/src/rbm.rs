//! Binary-binary restricted Boltzmann machine with CD-k and diversifying
//! regularization on the factorized hidden posterior.
//!
//! Energy: `E(x, h) = −xᵀWh − bᵥᵀx − bₕᵀh`. The hidden posterior factorizes,
//! `Q(h_j = 1 | x) = σ(Σ_i W_ij x_i + bₕ_j)`, so mean field is exact here and
//! the variational parameters are the model weights themselves.
//!
//! Updates are gradient ascent on
//! `(1/B)·[ Σ_b log P(x_b) + α·(1/(P·n_h))·Σ_pairs D_H(Q_p, Q_q) ]`
//! over the `B` rows and `P` pairs of a batch, with the ½ of the Hellinger
//! gradient folded into α. The DR term is a mean over pairs and hidden units.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis, Zip};

use crate::curve::LearningCurve;
use crate::divergence::{hellinger_sum, pair_coefficients, BernoulliProfile};
use crate::numerics::{sigmoid, softplus};
use crate::parallel::map_range;
use crate::sideinfo::{pairs_from_batch, PairSet};
use crate::{DenseMatrix, DenseVector, Error, Result, RngState};

pub const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Rbm {
    /// `n_visible × n_hidden`
    pub weights: DenseMatrix,
    pub visible_bias: DenseVector,
    pub hidden_bias: DenseVector,
    /// When false both bias vectors stay at zero.
    pub biases_enabled: bool,
}

/// Final state `(x⁽ᵏ⁾, h⁽ᵏ⁾)` of a k-step Gibbs chain.
#[derive(Debug, Clone, PartialEq)]
pub struct CdSample {
    pub visible_k: DenseVector,
    pub hidden_k: DenseVector,
}

/// Gradient with the same layout as [`Rbm`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmGradient {
    pub weights: DenseMatrix,
    pub visible_bias: DenseVector,
    pub hidden_bias: DenseVector,
}

impl RbmGradient {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros((n_visible, n_hidden)),
            visible_bias: DenseVector::zeros(n_visible),
            hidden_bias: DenseVector::zeros(n_hidden),
        }
    }

    /// Concatenation `[weights (row-major), visible_bias, hidden_bias]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.weights
            .iter()
            .chain(self.visible_bias.iter())
            .chain(self.hidden_bias.iter())
            .copied()
            .collect()
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.weights *= factor;
        self.visible_bias *= factor;
        self.hidden_bias *= factor;
        self
    }
}

/// Per-update monitoring values, measured before the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateMetrics {
    /// Mean of `Σ_j D_H` over the batch's cross-class pairs (0 without pairs).
    pub dr_value: f64,
    pub pseudo_log_likelihood: f64,
    pub pairs: usize,
}

impl Rbm {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros((n_visible, n_hidden)),
            visible_bias: DenseVector::zeros(n_visible),
            hidden_bias: DenseVector::zeros(n_hidden),
            biases_enabled: true,
        }
    }

    /// Gaussian weights (std 0.01), zero biases.
    pub fn random(n_visible: usize, n_hidden: usize, rng: &mut RngState) -> Self {
        Self {
            weights: rng.normal_matrix(n_visible, n_hidden, INIT_STD),
            ..Self::zeros(n_visible, n_hidden)
        }
    }

    pub fn n_visible(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_hidden(&self) -> usize {
        self.weights.ncols()
    }

    fn check_visible(&self, len: usize) -> Result<()> {
        if len != self.n_visible() {
            return Err(Error::dims("rbm visible layer", self.n_visible(), len));
        }
        Ok(())
    }

    fn check_hidden(&self, len: usize) -> Result<()> {
        if len != self.n_hidden() {
            return Err(Error::dims("rbm hidden layer", self.n_hidden(), len));
        }
        Ok(())
    }

    fn hidden_means(&self, x: ArrayView1<f64>) -> DenseVector {
        let mut z = x.dot(&self.weights) + &self.hidden_bias;
        z.mapv_inplace(sigmoid);
        z
    }

    fn visible_means(&self, h: ArrayView1<f64>) -> DenseVector {
        let mut z = self.weights.dot(&h) + &self.visible_bias;
        z.mapv_inplace(sigmoid);
        z
    }

    /// `P(h_j = 1 | x)` for every hidden unit.
    pub fn hidden_conditional(&self, x: ArrayView1<f64>) -> Result<BernoulliProfile> {
        self.check_visible(x.len())?;
        Ok(BernoulliProfile::from_probs(self.hidden_means(x).to_vec()))
    }

    /// `P(x_i = 1 | h)` for every visible unit.
    pub fn visible_conditional(&self, h: ArrayView1<f64>) -> Result<BernoulliProfile> {
        self.check_hidden(h.len())?;
        Ok(BernoulliProfile::from_probs(self.visible_means(h).to_vec()))
    }

    /// Factorized posterior `Q_x`. Identical to [`Rbm::hidden_conditional`]
    /// because a single RBM's posterior factorizes exactly.
    pub fn mean_field_posterior(&self, x: ArrayView1<f64>) -> Result<BernoulliProfile> {
        self.hidden_conditional(x)
    }

    /// Row-wise hidden means `σ(XW + bₕ)` of a batch.
    pub fn hidden_probs(&self, batch: ArrayView2<f64>) -> Result<DenseMatrix> {
        self.check_visible(batch.ncols())?;
        let mut z = batch.dot(&self.weights) + &self.hidden_bias;
        z.mapv_inplace(sigmoid);
        Ok(z)
    }

    pub fn energy(&self, x: ArrayView1<f64>, h: ArrayView1<f64>) -> f64 {
        -(x.dot(&self.weights).dot(&h) + self.visible_bias.dot(&x) + self.hidden_bias.dot(&h))
    }

    /// `F(x) = −bᵥᵀx − Σ_j softplus(bₕ_j + (xW)_j)`, so `P(x) ∝ e^{−F(x)}`.
    pub fn free_energy(&self, x: ArrayView1<f64>) -> f64 {
        let drive = x.dot(&self.weights) + &self.hidden_bias;
        -self.visible_bias.dot(&x) - drive.iter().map(|&z| softplus(z)).sum::<f64>()
    }

    /// Runs `h ~ P(h|x)`, `x ~ P(x|h)` alternately for `k` rounds from `x0`.
    pub fn gibbs_cd_k(&self, x0: ArrayView1<f64>, k: usize, rng: &mut RngState) -> Result<CdSample> {
        self.check_visible(x0.len())?;
        if k == 0 {
            return Err(Error::InvalidArgument("CD needs k >= 1".into()));
        }
        Ok(self.chain(x0, k, rng))
    }

    fn chain(&self, x0: ArrayView1<f64>, k: usize, rng: &mut RngState) -> CdSample {
        let sample = |means: DenseVector, rng: &mut RngState| means.mapv(|p| rng.bernoulli(p));
        let mut h = sample(self.hidden_means(x0), rng);
        let mut x = x0.to_owned();
        for _ in 0..k {
            x = sample(self.visible_means(h.view()), rng);
            h = sample(self.hidden_means(x.view()), rng);
        }
        CdSample {
            visible_k: x,
            hidden_k: h,
        }
    }

    /// Data-dependent term `Σ_b x_b μ_bᵀ` with mean-field `μ`, plus bias terms.
    pub fn positive_phase(&self, batch: ArrayView2<f64>) -> Result<RbmGradient> {
        let mu = self.hidden_probs(batch)?;
        Ok(RbmGradient {
            weights: batch.t().dot(&mu),
            visible_bias: batch.sum_axis(Axis(0)),
            hidden_bias: mu.sum_axis(Axis(0)),
        })
    }

    /// CD-k estimate of the summed log-likelihood gradient over `batch`.
    ///
    /// One chain per example; example `b` draws from stream `b` of a seed taken
    /// from `rng`, so the result is independent of the execution mode.
    pub fn cd_gradient(&self, batch: ArrayView2<f64>, k: usize, rng: &mut RngState) -> Result<RbmGradient> {
        self.cd_gradient_seeded(batch, k, rng.next_seed())
    }

    fn cd_gradient_seeded(&self, batch: ArrayView2<f64>, k: usize, seed: u64) -> Result<RbmGradient> {
        if batch.nrows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("CD needs k >= 1".into()));
        }
        let mut grad = self.positive_phase(batch)?;
        let samples = map_range(batch.nrows(), |b| {
            let mut rng = RngState::with_stream(seed, b as u64);
            self.chain(batch.row(b), k, &mut rng)
        });
        let n = samples.len();
        let xs = DenseMatrix::from_shape_fn((n, self.n_visible()), |(b, i)| samples[b].visible_k[i]);
        let hs = DenseMatrix::from_shape_fn((n, self.n_hidden()), |(b, j)| samples[b].hidden_k[j]);
        grad.weights -= &xs.t().dot(&hs);
        grad.visible_bias -= &xs.sum_axis(Axis(0));
        grad.hidden_bias -= &hs.sum_axis(Axis(0));
        Ok(grad)
    }

    /// Gradient of `Σ_pairs 2·Σ_j D_H(Q_p^j, Q_q^j)` (the ½ is folded into α).
    ///
    /// Hidden biases see the constant input 1; visible biases get zero.
    pub fn dr_gradient(&self, batch: ArrayView2<f64>, pairs: &PairSet) -> Result<RbmGradient> {
        pairs.check_bounds(batch.nrows())?;
        let mu = self.hidden_probs(batch)?;
        let coeff = pair_coefficient_matrix(&mu, pairs);
        Ok(RbmGradient {
            weights: batch.t().dot(&coeff),
            visible_bias: DenseVector::zeros(self.n_visible()),
            hidden_bias: coeff.sum_axis(Axis(0)),
        })
    }

    /// `Σ_pairs Σ_j D_H` over the batch.
    pub fn dr_value(&self, batch: ArrayView2<f64>, pairs: &PairSet) -> Result<f64> {
        pairs.check_bounds(batch.nrows())?;
        let mu = self.hidden_probs(batch)?;
        Ok(total_pair_divergence(&mu, pairs))
    }

    /// One ascent step `θ ← θ + (lr/B)·(CD + α·DR/(P·n_h))` on a batch of `B`
    /// rows and `P` pairs, where `CD` and `DR` are the summed gradients.
    ///
    /// Pairs come from [`pairs_from_batch`] on `labels`.
    pub fn regularized_update(
        &mut self,
        batch: ArrayView2<f64>,
        labels: &[usize],
        lr: f64,
        alpha: f64,
        k: usize,
        rng: &mut RngState,
    ) -> Result<UpdateMetrics> {
        if labels.len() != batch.nrows() {
            return Err(Error::dims("batch labels", batch.nrows(), labels.len()));
        }
        self.update_with_pairs(batch, &pairs_from_batch(labels), lr, alpha, k, rng)
    }

    /// As [`Rbm::regularized_update`] with a precomputed batch-local pair set.
    pub fn update_with_pairs(
        &mut self,
        batch: ArrayView2<f64>,
        pairs: &PairSet,
        lr: f64,
        alpha: f64,
        k: usize,
        rng: &mut RngState,
    ) -> Result<UpdateMetrics> {
        check_step(lr, alpha)?;
        let seed = rng.next_seed();
        let pll = self.pll_seeded(batch, &mut RngState::with_stream(seed, u64::MAX))?;
        let mut grad = self.cd_gradient_seeded(batch, k, seed)?;
        let mu = self.hidden_probs(batch)?;
        let dr_total = total_pair_divergence(&mu, pairs);
        if !pairs.is_empty() {
            pairs.check_bounds(batch.nrows())?;
            let coeff = pair_coefficient_matrix(&mu, pairs);
            let w = alpha / (pairs.len() * self.n_hidden()) as f64;
            grad.weights.scaled_add(w, &batch.t().dot(&coeff));
            grad.hidden_bias.scaled_add(w, &coeff.sum_axis(Axis(0)));
        }
        self.apply(&grad, lr / batch.nrows() as f64);
        Ok(UpdateMetrics {
            dr_value: if pairs.is_empty() { 0.0 } else { dr_total / pairs.len() as f64 },
            pseudo_log_likelihood: pll,
            pairs: pairs.len(),
        })
    }

    /// Unregularized CD-k step. Consumes the RNG exactly like
    /// [`Rbm::update_with_pairs`].
    pub fn cd_update(&mut self, batch: ArrayView2<f64>, lr: f64, k: usize, rng: &mut RngState) -> Result<()> {
        check_step(lr, 0.0)?;
        let seed = rng.next_seed();
        let grad = self.cd_gradient_seeded(batch, k, seed)?;
        self.apply(&grad, lr / batch.nrows() as f64);
        Ok(())
    }

    /// `θ ← θ + step·grad`.
    pub fn apply(&mut self, grad: &RbmGradient, step: f64) {
        self.weights.scaled_add(step, &grad.weights);
        if self.biases_enabled {
            self.visible_bias.scaled_add(step, &grad.visible_bias);
            self.hidden_bias.scaled_add(step, &grad.hidden_bias);
        }
    }

    /// Stochastic pseudo-log-likelihood: for each example one random visible
    /// index `i` is flipped and `n_v · ln σ(F(x̃) − F(x))` is averaged over the batch.
    ///
    /// Real-valued inputs are flipped as `x_i → 1 − x_i`.
    pub fn pseudo_log_likelihood(&self, batch: ArrayView2<f64>, rng: &mut RngState) -> Result<f64> {
        self.pll_seeded(batch, rng)
    }

    fn pll_seeded(&self, batch: ArrayView2<f64>, rng: &mut RngState) -> Result<f64> {
        self.check_visible(batch.ncols())?;
        if batch.nrows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let n_v = self.n_visible();
        let flips: Vec<usize> = (0..batch.nrows()).map(|_| rng.index(n_v)).collect();
        let terms = map_range(batch.nrows(), |b| n_v as f64 * self.flip_log_prob(batch.row(b), flips[b]));
        Ok(terms.iter().sum::<f64>() / batch.nrows() as f64)
    }

    /// Deterministic variant: mean over examples of `Σ_i ln P(x_i | x_{−i})`.
    pub fn pseudo_log_likelihood_all_sites(&self, batch: ArrayView2<f64>) -> Result<f64> {
        self.check_visible(batch.ncols())?;
        let terms = map_range(batch.nrows(), |b| {
            (0..self.n_visible())
                .map(|i| self.flip_log_prob(batch.row(b), i))
                .sum::<f64>()
        });
        Ok(terms.iter().sum::<f64>() / batch.nrows().max(1) as f64)
    }

    /// `ln σ(F(x̃_i) − F(x)) = ln P(x_i | x_{−i})`
    fn flip_log_prob(&self, x: ArrayView1<f64>, i: usize) -> f64 {
        let mut flipped = x.to_owned();
        flipped[i] = 1.0 - flipped[i];
        crate::numerics::log_sigmoid(self.free_energy(flipped.view()) - self.free_energy(x))
    }

    /// Parameters as `[weights, visible_bias, hidden_bias]`.
    pub fn to_flat(&self) -> DenseVector {
        self.weights
            .iter()
            .chain(self.visible_bias.iter())
            .chain(self.hidden_bias.iter())
            .copied()
            .collect()
    }

    pub fn from_flat(&self, flat: &[f64]) -> Rbm {
        let (n_v, n_h) = (self.n_visible(), self.n_hidden());
        assert_eq!(flat.len(), n_v * n_h + n_v + n_h, "flat parameter length");
        let (w, rest) = flat.split_at(n_v * n_h);
        let (vb, hb) = rest.split_at(n_v);
        Rbm {
            weights: DenseMatrix::from_shape_vec((n_v, n_h), w.to_vec()).expect("shape"),
            visible_bias: Array1::from(vb.to_vec()),
            hidden_bias: Array1::from(hb.to_vec()),
            biases_enabled: self.biases_enabled,
        }
    }
}

fn check_step(lr: f64, alpha: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(())
}

/// Row `b`, column `j`: sum of Hellinger gradient coefficients of example `b`
/// over every pair it belongs to. `Xᵀ·C` is then the weight gradient.
fn pair_coefficient_matrix(mu: &DenseMatrix, pairs: &PairSet) -> DenseMatrix {
    let mut coeff = DenseMatrix::zeros(mu.raw_dim());
    for (p, q) in pairs.iter() {
        for j in 0..mu.ncols() {
            let (cp, cq) = pair_coefficients(mu[[p, j]], mu[[q, j]]);
            coeff[[p, j]] += cp;
            coeff[[q, j]] += cq;
        }
    }
    coeff
}

fn total_pair_divergence(mu: &DenseMatrix, pairs: &PairSet) -> f64 {
    pairs
        .iter()
        .map(|(p, q)| {
            hellinger_sum(
                mu.row(p).as_slice().expect("contiguous"),
                mu.row(q).as_slice().expect("contiguous"),
            )
        })
        .sum()
}

/// Training schedule for a single RBM.
#[derive(Debug, Clone)]
pub struct RbmTraining {
    pub lr: f64,
    pub alpha: f64,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Minibatch training; the example order is reshuffled every epoch and the
/// side information for all batches is built at the start of the epoch.
///
/// Curve columns: `pll` (batch-mean stochastic PLL averaged over the epoch) and
/// `dr_value` (mean per-pair Hellinger total).
pub fn train(
    rbm: &mut Rbm,
    data: ArrayView2<f64>,
    labels: &[usize],
    schedule: &RbmTraining,
    rng: &mut RngState,
) -> Result<LearningCurve> {
    if labels.len() != data.nrows() {
        return Err(Error::dims("training labels", data.nrows(), labels.len()));
    }
    if schedule.batch_size == 0 || data.nrows() == 0 {
        return Err(Error::InvalidArgument("need a nonempty dataset and batch size".into()));
    }
    let mut curve = LearningCurve::new(["pll", "dr_value"]);
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    for epoch in 0..schedule.epochs {
        rng.shuffle(&mut order);
        let batches: Vec<&[usize]> = order.chunks(schedule.batch_size).collect();
        let pairs: Vec<PairSet> = batches
            .iter()
            .map(|idx| {
                let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                pairs_from_batch(&batch_labels)
            })
            .collect();
        let (mut pll, mut dr, mut dr_batches) = (0.0, 0.0, 0usize);
        for (idx, pairs) in batches.iter().zip(&pairs) {
            let batch = data.select(Axis(0), idx);
            let m = rbm.update_with_pairs(batch.view(), pairs, schedule.lr, schedule.alpha, schedule.k, rng)?;
            pll += m.pseudo_log_likelihood;
            if m.pairs > 0 {
                dr += m.dr_value;
                dr_batches += 1;
            }
        }
        curve.push(
            epoch,
            [pll / batches.len() as f64, dr / dr_batches.max(1) as f64],
        )?;
    }
    Ok(curve)
}

/// Exhaustive-enumeration oracles for small models.
pub mod exact {
    use super::*;
    use crate::numerics::log_sum_exp;

    /// `n_visible + n_hidden` limit for enumeration.
    pub const MAX_UNITS: usize = 20;

    fn check_size(model: &Rbm) -> Result<()> {
        let units = model.n_visible() + model.n_hidden();
        if units > MAX_UNITS {
            return Err(Error::EnumerationTooLarge(units));
        }
        Ok(())
    }

    /// Binary state number `bits` over `n` units.
    pub fn state(bits: usize, n: usize) -> DenseVector {
        Array1::from_shape_fn(n, |i| ((bits >> i) & 1) as f64)
    }

    fn states(n: usize) -> Vec<DenseVector> {
        (0..1usize << n).map(|s| state(s, n)).collect()
    }

    /// `ln Z` by summing `e^{−E(x,h)}` over every joint state.
    pub fn log_partition(model: &Rbm) -> Result<f64> {
        check_size(model)?;
        let hs = states(model.n_hidden());
        Ok(log_sum_exp(states(model.n_visible()).iter().flat_map(|x| {
            hs.iter().map(move |h| -model.energy(x.view(), h.view()))
        })))
    }

    fn log_unnormalized_marginal(model: &Rbm, x: ArrayView1<f64>, hs: &[DenseVector]) -> f64 {
        log_sum_exp(hs.iter().map(|h| -model.energy(x, h.view())))
    }

    /// `Σ_{x∈batch} ln P(x)` with every sum done by enumeration.
    pub fn exact_log_likelihood(model: &Rbm, batch: ArrayView2<f64>) -> Result<f64> {
        model.check_visible(batch.ncols())?;
        let log_z = log_partition(model)?;
        let hs = states(model.n_hidden());
        Ok(batch
            .rows()
            .into_iter()
            .map(|x| log_unnormalized_marginal(model, x, &hs) - log_z)
            .sum())
    }

    /// `P(h_j = 1 | x)` by enumerating hidden states.
    pub fn hidden_posterior(model: &Rbm, x: ArrayView1<f64>) -> Result<Vec<f64>> {
        check_size(model)?;
        model.check_visible(x.len())?;
        let hs = states(model.n_hidden());
        let log_norm = log_unnormalized_marginal(model, x, &hs);
        let mut post = vec![0.0; model.n_hidden()];
        for h in &hs {
            let w = (-model.energy(x, h.view()) - log_norm).exp();
            for (p, &hj) in post.iter_mut().zip(h.iter()) {
                *p += w * hj;
            }
        }
        Ok(post)
    }

    /// Data-dependent term `Σ_b Σ_h P(h|x_b) x_b hᵀ` by enumeration.
    pub fn positive_phase(model: &Rbm, batch: ArrayView2<f64>) -> Result<RbmGradient> {
        let mut grad = RbmGradient::zeros(model.n_visible(), model.n_hidden());
        for x in batch.rows() {
            let post = Array1::from(hidden_posterior(model, x)?);
            Zip::from(&mut grad.weights)
                .and_broadcast(&x.insert_axis(Axis(1)))
                .and_broadcast(&post.view().insert_axis(Axis(0)))
                .for_each(|g, &xi, &pj| *g += xi * pj);
            grad.visible_bias += &x;
            grad.hidden_bias += &post;
        }
        Ok(grad)
    }

    /// `E_model[x hᵀ]` (and bias moments) by enumerating the joint.
    pub fn model_moments(model: &Rbm) -> Result<RbmGradient> {
        let log_z = log_partition(model)?;
        let hs = states(model.n_hidden());
        let mut m = RbmGradient::zeros(model.n_visible(), model.n_hidden());
        for x in states(model.n_visible()) {
            for h in &hs {
                let p = (-model.energy(x.view(), h.view()) - log_z).exp();
                for i in 0..x.len() {
                    for j in 0..h.len() {
                        m.weights[[i, j]] += p * x[i] * h[j];
                    }
                }
                m.visible_bias.scaled_add(p, &x);
                m.hidden_bias.scaled_add(p, h);
            }
        }
        Ok(m)
    }

    /// Log-likelihood gradient with both phases exact: the mean-field positive
    /// phase of [`Rbm::positive_phase`] minus `B·E_model[·]`.
    pub fn exact_gradient(model: &Rbm, batch: ArrayView2<f64>) -> Result<RbmGradient> {
        let mut grad = model.positive_phase(batch)?;
        let moments = model_moments(model)?;
        let b = batch.nrows() as f64;
        grad.weights.scaled_add(-b, &moments.weights);
        grad.visible_bias.scaled_add(-b, &moments.visible_bias);
        grad.hidden_bias.scaled_add(-b, &moments.hidden_bias);
        Ok(grad)
    }

    /// `P(x)` for every visible state, indexed by [`state`] number.
    pub fn visible_distribution(model: &Rbm) -> Result<Vec<f64>> {
        let log_z = log_partition(model)?;
        let hs = states(model.n_hidden());
        Ok(states(model.n_visible())
            .iter()
            .map(|x| (log_unnormalized_marginal(model, x.view(), &hs) - log_z).exp())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::exact::*;
    use super::*;
    use crate::divergence::{hellinger_grad_pair, hellinger_total};
    use crate::numerics::{finite_diff_grad, relative_error, FD_EPS};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn random_model(seed: u64, n_v: usize, n_h: usize, scale: f64) -> Rbm {
        let mut rng = RngState::new(seed);
        let mut m = Rbm::zeros(n_v, n_h);
        m.weights = rng.normal_matrix(n_v, n_h, scale);
        m.visible_bias = Array1::from_shape_simple_fn(n_v, || 0.5 * scale * rng.normal());
        m.hidden_bias = Array1::from_shape_simple_fn(n_h, || 0.5 * scale * rng.normal());
        m
    }

    fn binary_batch(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
        let mut rng = RngState::new(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.bernoulli(0.5))
    }

    #[test]
    fn conditionals_fixed_points() {
        let zero = Rbm::zeros(3, 2);
        let x = array![1.0, 0.0, 1.0];
        assert_eq!(zero.hidden_conditional(x.view()).unwrap().means(), &[0.5, 0.5]);
        assert_eq!(zero.visible_conditional(array![1.0, 1.0].view()).unwrap().means(), &[0.5; 3]);

        let mut one = Rbm::zeros(1, 1);
        one.weights[[0, 0]] = 3f64.ln();
        assert_abs_diff_eq!(one.hidden_conditional(array![1.0].view()).unwrap().means()[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(one.visible_conditional(array![1.0].view()).unwrap().means()[0], 0.75, epsilon = 1e-15);

        let m = random_model(1, 3, 2, 1.0);
        let h = m.hidden_conditional(Array1::zeros(3).view()).unwrap();
        for (mu, b) in h.means().iter().zip(m.hidden_bias.iter()) {
            assert_eq!(*mu, sigmoid(*b));
        }
        let v = m.visible_conditional(Array1::zeros(2).view()).unwrap();
        for (mu, b) in v.means().iter().zip(m.visible_bias.iter()) {
            assert_eq!(*mu, sigmoid(*b));
        }
        assert!(m.hidden_conditional(Array1::zeros(4).view()).is_err());
        assert!(m.visible_conditional(Array1::zeros(3).view()).is_err());
    }

    #[test]
    fn mean_field_is_exact_posterior() {
        let m = random_model(2, 3, 2, 1.5);
        for s in 0..8 {
            let x = state(s, 3);
            let mf = m.mean_field_posterior(x.view()).unwrap();
            assert_eq!(mf, m.hidden_conditional(x.view()).unwrap());
            let enumerated = hidden_posterior(&m, x.view()).unwrap();
            for (a, b) in mf.means().iter().zip(&enumerated) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn gibbs_is_deterministic_per_seed() {
        let m = random_model(3, 5, 4, 1.0);
        let x0 = array![1.0, 0.0, 1.0, 1.0, 0.0];
        let a = m.gibbs_cd_k(x0.view(), 1, &mut RngState::new(10)).unwrap();
        let b = m.gibbs_cd_k(x0.view(), 1, &mut RngState::new(10)).unwrap();
        assert_eq!(a, b);
        assert!(a.visible_k.iter().chain(a.hidden_k.iter()).all(|&v| v == 0.0 || v == 1.0));
        assert!(m.gibbs_cd_k(x0.view(), 0, &mut RngState::new(10)).is_err());
    }

    #[test]
    fn sampled_hidden_marginal_matches_conditional() {
        // With k = 1 from fixed x, h⁽⁰⁾ ~ P(h|x) exactly; its empirical mean
        // over many chains must sit within 3σ of the closed form.
        let mut m = Rbm::zeros(2, 1);
        m.weights = array![[0.7], [-1.3]];
        m.hidden_bias[0] = 0.2;
        let x = array![1.0, 1.0];
        let p = m.hidden_conditional(x.view()).unwrap().means()[0];
        let n = 100_000;
        let mut rng = RngState::new(77);
        let mut hits = 0.0;
        for _ in 0..n {
            let h = m.hidden_means(x.view()).mapv(|q| rng.bernoulli(q));
            hits += h[0];
        }
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits / n as f64 - p).abs() < 3.0 * sigma);

        // Long chains sample the model's hidden marginal.
        let dist = visible_distribution(&m).unwrap();
        let mut expected = 0.0;
        for (s, px) in dist.iter().enumerate() {
            expected += px * m.hidden_means(state(s, 2).view())[0];
        }
        let chains = 20_000;
        let mut hk = 0.0;
        for c in 0..chains {
            let mut r = RngState::with_stream(5, c);
            hk += m.gibbs_cd_k(x.view(), 20, &mut r).unwrap().hidden_k[0];
        }
        let sigma = (expected * (1.0 - expected) / chains as f64).sqrt();
        assert!((hk / chains as f64 - expected).abs() < 4.0 * sigma);
    }

    #[test]
    fn positive_phase_matches_enumeration() {
        let m = random_model(4, 3, 2, 1.2);
        let batch = binary_batch(5, 6, 3);
        let mf = m.positive_phase(batch.view()).unwrap();
        let en = exact::positive_phase(&m, batch.view()).unwrap();
        for (a, b) in mf.to_flat().iter().zip(en.to_flat()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let m = random_model(seed, 4, 3, 0.8);
            let batch = binary_batch(100 + seed, 5, 4);
            let analytic = exact_gradient(&m, batch.view()).unwrap().to_flat();
            let numeric = finite_diff_grad(
                |t| exact_log_likelihood(&m.from_flat(t.as_slice().unwrap()), batch.view()).unwrap(),
                &m.to_flat(),
                FD_EPS,
            )
            .unwrap();
            let rel = relative_error(&analytic, numeric.as_slice().unwrap());
            assert!(rel <= 1e-5, "seed {seed}: rel = {rel}");
        }
    }

    #[test]
    fn cd_gradient_vanishes_at_equilibrium() {
        // Data drawn from the model itself: E[CD-1 gradient] = 0.
        let m = random_model(6, 3, 2, 1.0);
        let dist = visible_distribution(&m).unwrap();
        let mut rng = RngState::new(8);
        let n = 40_000;
        let batch = Array2::from_shape_fn((n, 3), |_| 0.0);
        let mut batch = batch;
        for mut row in batch.rows_mut() {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut s = dist.len() - 1;
            for (i, p) in dist.iter().enumerate() {
                acc += p;
                if u < acc {
                    s = i;
                    break;
                }
            }
            row.assign(&state(s, 3));
        }
        let g = m.cd_gradient(batch.view(), 1, &mut rng).unwrap().scaled(1.0 / n as f64);
        for v in g.to_flat() {
            assert!(v.abs() < 0.02, "component {v}");
        }
    }

    #[test]
    fn cd_gradient_deterministic_and_mode_independent() {
        use crate::parallel::{set_execution, Execution};
        let m = random_model(9, 6, 4, 1.0);
        let batch = binary_batch(10, 8, 6);
        set_execution(Execution::Sequential);
        let a = m.cd_gradient(batch.view(), 2, &mut RngState::new(1)).unwrap();
        set_execution(Execution::Parallel);
        let b = m.cd_gradient(batch.view(), 2, &mut RngState::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(m.cd_gradient(Array2::zeros((0, 6)).view(), 1, &mut RngState::new(1)).is_err());
    }

    fn dr_objective(m: &Rbm, batch: &Array2<f64>, pairs: &PairSet) -> f64 {
        pairs
            .iter()
            .map(|(p, q)| {
                hellinger_total(
                    &m.mean_field_posterior(batch.row(p)).unwrap(),
                    &m.mean_field_posterior(batch.row(q)).unwrap(),
                )
                .unwrap()
            })
            .sum()
    }

    #[test]
    fn dr_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let m = random_model(seed, 5, 4, 1.0);
            let batch = binary_batch(200 + seed, 6, 5);
            let pairs = pairs_from_batch(&[0, 1, 2, 0, 1, 2]);
            let analytic = m.dr_gradient(batch.view(), &pairs).unwrap().to_flat();
            let numeric = finite_diff_grad(
                |t| 2.0 * dr_objective(&m.from_flat(t.as_slice().unwrap()), &batch, &pairs),
                &m.to_flat(),
                FD_EPS,
            )
            .unwrap();
            let rel = relative_error(&analytic, numeric.as_slice().unwrap());
            assert!(rel <= 1e-5, "seed {seed}: rel = {rel}");
        }
    }

    #[test]
    fn dr_gradient_is_twice_pairwise_hellinger_gradient() {
        let m = random_model(12, 4, 3, 1.0);
        let batch = binary_batch(13, 4, 4);
        let pairs = pairs_from_batch(&[0, 1, 1, 0]);
        let dr = m.dr_gradient(batch.view(), &pairs).unwrap();
        let mut sum = DenseMatrix::zeros((4, 3));
        for (p, q) in pairs.iter() {
            let g = hellinger_grad_pair(
                batch.row(p),
                batch.row(q),
                &m.mean_field_posterior(batch.row(p)).unwrap(),
                &m.mean_field_posterior(batch.row(q)).unwrap(),
            )
            .unwrap();
            sum.scaled_add(2.0, &g);
        }
        for (a, b) in dr.weights.iter().zip(sum.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert!(dr.visible_bias.iter().all(|&v| v == 0.0));
        let empty = m.dr_gradient(batch.view(), &PairSet::empty()).unwrap();
        assert!(empty.to_flat().iter().all(|&v| v == 0.0));
        let bad = PairSet::from_pairs(vec![(0, 1)], &[0, 1]).unwrap();
        assert!(m.dr_gradient(batch.slice(ndarray::s![..1, ..]), &bad).is_err());
    }

    #[test]
    fn alpha_zero_matches_plain_cd() {
        let data = binary_batch(14, 40, 6);
        let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let mut a = Rbm::random(6, 4, &mut RngState::new(3));
        let mut b = a.clone();
        let (mut ra, mut rb) = (RngState::new(15), RngState::new(15));
        for step in 0..30 {
            let rows = ndarray::s![(step % 4) * 10..(step % 4 + 1) * 10, ..];
            a.regularized_update(data.slice(rows), &labels[(step % 4) * 10..(step % 4 + 1) * 10], 0.05, 0.0, 1, &mut ra)
                .unwrap();
            b.cd_update(data.slice(rows), 0.05, 1, &mut rb).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn update_rejects_bad_arguments() {
        let mut m = Rbm::zeros(2, 2);
        let batch = array![[1.0, 0.0]];
        let mut rng = RngState::new(0);
        assert!(m.regularized_update(batch.view(), &[0], 0.0, 1.0, 1, &mut rng).is_err());
        assert!(m.regularized_update(batch.view(), &[0], 0.1, -1.0, 1, &mut rng).is_err());
        assert!(m.regularized_update(batch.view(), &[0, 1], 0.1, 1.0, 1, &mut rng).is_err());
    }

    #[test]
    fn dr_grows_on_two_class_toy() {
        // Two well-separated binary prototypes with bit noise.
        let mut curves = Vec::new();
        for seed in 0..5 {
            let mut rng = RngState::new(seed);
            let n = 60;
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let data = Array2::from_shape_fn((n, 8), |(r, c)| {
                let proto = if (c < 4) == (labels[r] == 0) { 0.9 } else { 0.1 };
                (rng.uniform() < proto) as u8 as f64
            });
            let mut m = Rbm::random(8, 4, &mut rng);
            let mut per_epoch = Vec::new();
            let pairs = pairs_from_batch(&labels);
            for _epoch in 0..50 {
                per_epoch.push(m.dr_value(data.view(), &pairs).unwrap() / pairs.len() as f64);
                for chunk in 0..6 {
                    let rows = ndarray::s![chunk * 10..(chunk + 1) * 10, ..];
                    m.regularized_update(data.slice(rows), &labels[chunk * 10..(chunk + 1) * 10], 0.01, 50.0, 1, &mut rng)
                        .unwrap();
                }
            }
            curves.push(per_epoch);
        }
        let mean: Vec<f64> = (0..50).map(|e| curves.iter().map(|c| c[e]).sum::<f64>() / 5.0).collect();
        for w in mean.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "DR decreased: {} -> {}", w[0], w[1]);
        }
        assert!(mean[49] > mean[0]);
    }

    #[test]
    fn pll_examples() {
        let zero = Rbm::zeros(5, 3);
        let batch = binary_batch(16, 7, 5);
        let expected = 5.0 * 0.5f64.ln();
        for seed in 0..3 {
            let pll = zero.pseudo_log_likelihood(batch.view(), &mut RngState::new(seed)).unwrap();
            assert_abs_diff_eq!(pll, expected, epsilon = 1e-12);
        }

        let m = random_model(17, 3, 2, 1.3);
        let batch = binary_batch(18, 4, 3);
        let all_sites = m.pseudo_log_likelihood_all_sites(batch.view()).unwrap();
        // Oracle: Σ_i ln P(x_i | x_{−i}) from the enumerated joint.
        let dist = visible_distribution(&m).unwrap();
        let index = |x: &Array1<f64>| x.iter().enumerate().map(|(i, &v)| (v as usize) << i).sum::<usize>();
        let mut oracle = 0.0;
        for x in batch.rows() {
            let x = x.to_owned();
            for i in 0..3 {
                let s = index(&x);
                let flipped = s ^ (1 << i);
                oracle += (dist[s] / (dist[s] + dist[flipped])).ln();
            }
        }
        oracle /= batch.nrows() as f64;
        assert_abs_diff_eq!(all_sites, oracle, epsilon = 1e-10);
    }

    #[test]
    fn exact_likelihood_examples() {
        let one = Rbm::zeros(1, 1);
        assert_abs_diff_eq!(exact_log_likelihood(&one, array![[1.0]].view()).unwrap(), 0.5f64.ln(), epsilon = 1e-14);
        let two = Rbm::zeros(2, 1);
        assert_abs_diff_eq!(exact_log_likelihood(&two, array![[0.0, 1.0]].view()).unwrap(), 0.25f64.ln(), epsilon = 1e-14);

        let m = random_model(19, 4, 3, 1.0);
        let all = Array2::from_shape_fn((16, 4), |(s, i)| ((s >> i) & 1) as f64);
        let total: f64 = all
            .rows()
            .into_iter()
            .map(|x| exact_log_likelihood(&m, x.insert_axis(Axis(0))).unwrap().exp())
            .sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
        assert!(matches!(log_partition(&Rbm::zeros(15, 6)), Err(Error::EnumerationTooLarge(21))));
    }

    #[test]
    fn flat_round_trip() {
        let m = random_model(20, 3, 2, 1.0);
        assert_eq!(m.from_flat(m.to_flat().as_slice().unwrap()), m);
    }

    #[test]
    fn train_records_one_row_per_epoch() {
        let data = binary_batch(21, 30, 6);
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let mut m = Rbm::random(6, 3, &mut RngState::new(1));
        let schedule = RbmTraining { lr: 0.05, alpha: 1.0, k: 1, epochs: 4, batch_size: 10 };
        let curve = train(&mut m, data.view(), &labels, &schedule, &mut RngState::new(2)).unwrap();
        assert_eq!(curve.len(), 4);
    }
}
