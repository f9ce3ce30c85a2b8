//! Variational autoencoder with a diagonal-Gaussian encoder, a Bernoulli
//! decoder, and reconstruction-level diversifying regularization.
//!
//! Trained by gradient ascent on the batch mean of
//!
//! ```text
//! Σ_x ELBO(x) − α Σ_pairs D_CE(x_p, x_q)     (mode ce, D_CE is a similarity)
//! Σ_x ELBO(x) + α Σ_pairs D₂(x_p, x_q)       (mode l2, D₂ is a distance)
//! ```
//!
//! with one reparameterized sample per example and one shared noise draw per
//! pair.

use std::io::Write as _;
use std::path::Path;

use ndarray::{concatenate, s, Array1, ArrayView1, ArrayView2, Axis};

use crate::curve::LearningCurve;
use crate::dnn::{Mlp, MlpGradient, OutputActivation};
use crate::numerics::softplus;
use crate::sideinfo::{pairs_from_batch, PairSet};
use crate::{DenseMatrix, DenseVector, Error, Result, RngState};

pub const LOG_VAR_CLAMP: f64 = 30.0;
pub const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    /// Emits `[μ, log σ²]`, `2·latent` linear outputs.
    pub encoder: Mlp,
    /// Emits Bernoulli means over the input.
    pub decoder: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: DenseVector,
    pub epsilon: DenseVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrMode {
    None,
    CrossEntropy,
    L2,
}

impl std::str::FromStr for DrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DrMode::None),
            "ce" => Ok(DrMode::CrossEntropy),
            "l2" => Ok(DrMode::L2),
            other => Err(Error::Config(format!("unknown DR mode '{other}' (none, ce, l2)"))),
        }
    }
}

/// Standard-normal draws behind every stochastic term of a batch.
#[derive(Debug, Clone)]
pub struct Noise {
    /// `B × latent`, one row per example.
    pub examples: DenseMatrix,
    /// `P × latent`, one row per pair.
    pub pairs: DenseMatrix,
}

impl Noise {
    pub fn draw(batch: usize, pairs: usize, latent: usize, rng: &mut RngState) -> Self {
        let examples = DenseMatrix::from_shape_simple_fn((batch, latent), || rng.normal());
        let pairs = DenseMatrix::from_shape_simple_fn((pairs, latent), || rng.normal());
        Self { examples, pairs }
    }
}

/// DR term configuration for [`VaeModel::objective`].
#[derive(Debug, Clone, Copy)]
pub struct Regularizer<'a> {
    pub mode: DrMode,
    pub alpha: f64,
    pub pairs: &'a PairSet,
}

impl Regularizer<'_> {
    pub const NONE: Regularizer<'static> = Regularizer {
        mode: DrMode::None,
        alpha: 0.0,
        pairs: &EMPTY_PAIRS,
    };

    fn active(&self) -> bool {
        self.mode != DrMode::None && !self.pairs.is_empty()
    }
}

static EMPTY_PAIRS: PairSet = PairSet::empty();

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchObjective {
    /// `Σ_x ELBO(x)`
    pub elbo: f64,
    /// Mean raw `D_CE` or `D₂` over pairs (0 without DR).
    pub dr_value: f64,
    /// Batch-mean maximized objective.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGradient {
    pub encoder: MlpGradient,
    pub decoder: MlpGradient,
}

impl VaeGradient {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.encoder.to_flat();
        v.extend(self.decoder.to_flat());
        v
    }
}

/// `Σ_i x_i a_i − softplus(a_i)`: Bernoulli log-likelihood from logits.
fn bernoulli_log_lik(x: ArrayView1<f64>, logits: ArrayView1<f64>) -> f64 {
    x.iter().zip(logits).map(|(&xi, &a)| xi * a - softplus(a)).sum()
}

/// `KL(N(μ, σ²) ‖ N(0, 1))` summed over dimensions.
pub fn gaussian_kl(mu: ArrayView1<f64>, log_var: ArrayView1<f64>) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

impl VaeModel {
    /// `input → hidden → 2·latent` encoder and `latent → hidden → input` decoder.
    pub fn new(input: usize, hidden: usize, latent: usize, init_std: f64, rng: &mut RngState) -> Self {
        Self {
            encoder: Mlp::random(&[input, hidden, 2 * latent], init_std, OutputActivation::Identity, rng),
            decoder: Mlp::random(&[latent, hidden, input], init_std, OutputActivation::Sigmoid, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize, latent: usize) -> Self {
        Self {
            encoder: Mlp::zeros(&[input, hidden, 2 * latent], OutputActivation::Identity),
            decoder: Mlp::zeros(&[latent, hidden, input], OutputActivation::Sigmoid),
        }
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        if encoder.output_dim() != 2 * decoder.input_dim() {
            return Err(Error::dims("vae encoder output", 2 * decoder.input_dim(), encoder.output_dim()));
        }
        if encoder.input_dim() != decoder.output_dim() {
            return Err(Error::dims("vae decoder output", encoder.input_dim(), decoder.output_dim()));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    /// `(μ, log σ²)` with `log σ²` clamped to `±30`.
    pub fn encode(&self, x: ArrayView1<f64>) -> Result<(DenseVector, DenseVector)> {
        let out = self.encoder.forward(x)?.output;
        let d = self.latent_dim();
        let mu = out.slice(s![0, ..d]).to_owned();
        let lv = out.slice(s![0, d..]).mapv(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP));
        Ok((mu, lv))
    }

    /// Bernoulli means `P(x | z)` for each row of `z`.
    pub fn decode(&self, z: ArrayView2<f64>) -> Result<DenseMatrix> {
        Ok(self.decoder.forward_batch(z)?.output)
    }

    fn decode_logits(&self, z: ArrayView1<f64>) -> Result<DenseVector> {
        Ok(self.decoder.forward(z)?.logits.row(0).to_owned())
    }

    /// Single-sample ELBO summed over the batch.
    pub fn elbo(&self, batch: ArrayView2<f64>, rng: &mut RngState) -> Result<f64> {
        let d = self.latent_dim();
        let mut total = 0.0;
        for x in batch.rows() {
            let (mu, lv) = self.encode(x)?;
            let sample = reparameterize(mu.view(), lv.view(), rng)?;
            total += bernoulli_log_lik(x, self.decode_logits(sample.z.view())?.view());
            total -= gaussian_kl(mu.view(), lv.view());
            debug_assert_eq!(sample.epsilon.len(), d);
        }
        Ok(total)
    }

    /// `E_{Q(x_q)}[ln P(x_p | H)]`, one sample. A similarity: larger when the
    /// code of `x_q` also explains `x_p`.
    pub fn dr_cross_entropy(&self, x_p: ArrayView1<f64>, x_q: ArrayView1<f64>, rng: &mut RngState) -> Result<f64> {
        if x_p.len() != self.input_dim() {
            return Err(Error::dims("vae input", self.input_dim(), x_p.len()));
        }
        let (mu, lv) = self.encode(x_q)?;
        let sample = reparameterize(mu.view(), lv.view(), rng)?;
        Ok(bernoulli_log_lik(x_p, self.decode_logits(sample.z.view())?.view()))
    }

    /// `‖decode(z_p) − decode(z_q)‖²` with one noise draw shared by both codes.
    pub fn dr_reconstruction_l2(&self, x_p: ArrayView1<f64>, x_q: ArrayView1<f64>, rng: &mut RngState) -> Result<f64> {
        let (mu_p, lv_p) = self.encode(x_p)?;
        let (mu_q, lv_q) = self.encode(x_q)?;
        let eps = Array1::from_shape_simple_fn(self.latent_dim(), || rng.normal());
        let z_p = &mu_p + &(lv_p.mapv(|v| (0.5 * v).exp()) * &eps);
        let z_q = &mu_q + &(lv_q.mapv(|v| (0.5 * v).exp()) * &eps);
        let z = ndarray::stack(Axis(0), &[z_p.view(), z_q.view()]).expect("equal shapes");
        let m = self.decode(z.view())?;
        Ok(m.row(0).iter().zip(m.row(1)).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    /// Batch objective with frozen noise, and optionally its gradient
    /// (ascent direction).
    pub fn objective(
        &self,
        batch: ArrayView2<f64>,
        reg: Regularizer<'_>,
        noise: &Noise,
        want_grad: bool,
    ) -> Result<(BatchObjective, Option<VaeGradient>)> {
        let (b, d) = (batch.nrows(), self.latent_dim());
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if noise.examples.dim() != (b, d) {
            return Err(Error::dims("example noise rows", b, noise.examples.nrows()));
        }
        reg.pairs.check_bounds(b)?;
        let active = reg.active();
        if active && noise.pairs.dim() != (reg.pairs.len(), d) {
            return Err(Error::dims("pair noise rows", reg.pairs.len(), noise.pairs.nrows()));
        }
        let inv_b = 1.0 / b as f64;

        let enc = self.encoder.forward_batch(batch)?;
        let mu = enc.output.slice(s![.., ..d]).to_owned();
        let raw_lv = enc.output.slice(s![.., d..]).to_owned();
        let lv = raw_lv.mapv(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP));
        let std = lv.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&std * &noise.examples);
        let dec = self.decoder.forward_batch(z.view())?;

        let mut elbo = 0.0;
        for r in 0..b {
            elbo += bernoulli_log_lik(batch.row(r), dec.logits.row(r));
            elbo -= gaussian_kl(mu.row(r), lv.row(r));
        }

        // ∂/∂μ and ∂/∂log σ² accumulated from every term.
        let mut d_mu = DenseMatrix::zeros((b, d));
        let mut d_lv = DenseMatrix::zeros((b, d));
        let mut dec_grad = want_grad.then(|| MlpGradient::zeros_like(&self.decoder));

        if let Some(dg) = dec_grad.as_mut() {
            let d_logits = (&batch - &dec.output) * inv_b;
            let (g, dz) = self.decoder.backward(&dec, d_logits, &[], true);
            dg.add_assign(&g);
            let dz = dz.expect("input gradient");
            d_mu += &dz;
            d_mu.scaled_add(-inv_b, &mu);
            d_lv += &(&dz * &noise.examples * &std * 0.5);
            d_lv.scaled_add(-0.5 * inv_b, &lv.mapv(|v| v.exp() - 1.0));
        }

        let mut dr_sum = 0.0;
        if active {
            let pairs = reg.pairs.pairs();
            let ps: Vec<usize> = pairs.iter().map(|&(p, _)| p).collect();
            let qs: Vec<usize> = pairs.iter().map(|&(_, q)| q).collect();
            match reg.mode {
                DrMode::CrossEntropy => {
                    let z_q = mu.select(Axis(0), &qs) + &(std.select(Axis(0), &qs) * &noise.pairs);
                    let pass = self.decoder.forward_batch(z_q.view())?;
                    let targets = batch.select(Axis(0), &ps);
                    for k in 0..pairs.len() {
                        dr_sum += bernoulli_log_lik(targets.row(k), pass.logits.row(k));
                    }
                    if let Some(dg) = dec_grad.as_mut() {
                        let d_logits = (&targets - &pass.output) * (-reg.alpha * inv_b);
                        let (g, dz) = self.decoder.backward(&pass, d_logits, &[], true);
                        dg.add_assign(&g);
                        let dz = dz.expect("input gradient");
                        for (k, &q) in qs.iter().enumerate() {
                            accumulate_latent(&mut d_mu, &mut d_lv, q, dz.row(k), noise.pairs.row(k), std.row(q));
                        }
                    }
                }
                DrMode::L2 => {
                    let z_p = mu.select(Axis(0), &ps) + &(std.select(Axis(0), &ps) * &noise.pairs);
                    let z_q = mu.select(Axis(0), &qs) + &(std.select(Axis(0), &qs) * &noise.pairs);
                    let z_pq = concatenate(Axis(0), &[z_p.view(), z_q.view()]).expect("equal widths");
                    let pass = self.decoder.forward_batch(z_pq.view())?;
                    let n = pairs.len();
                    let diff = &pass.output.slice(s![..n, ..]) - &pass.output.slice(s![n.., ..]);
                    dr_sum = diff.iter().map(|v| v * v).sum();
                    if let Some(dg) = dec_grad.as_mut() {
                        let scaled = &diff * (2.0 * reg.alpha * inv_b);
                        let d_out = concatenate(Axis(0), &[scaled.view(), (-&scaled).view()]).expect("equal widths");
                        let d_logits = d_out * &pass.output.mapv(|m| m * (1.0 - m));
                        let (g, dz) = self.decoder.backward(&pass, d_logits, &[], true);
                        dg.add_assign(&g);
                        let dz = dz.expect("input gradient");
                        for (k, (&p, &q)) in ps.iter().zip(&qs).enumerate() {
                            accumulate_latent(&mut d_mu, &mut d_lv, p, dz.row(k), noise.pairs.row(k), std.row(p));
                            accumulate_latent(&mut d_mu, &mut d_lv, q, dz.row(n + k), noise.pairs.row(k), std.row(q));
                        }
                    }
                }
                DrMode::None => unreachable!(),
            }
        }

        let signed_dr = match reg.mode {
            DrMode::CrossEntropy => -reg.alpha * dr_sum,
            DrMode::L2 => reg.alpha * dr_sum,
            DrMode::None => 0.0,
        };
        let value = BatchObjective {
            elbo,
            dr_value: if active { dr_sum / reg.pairs.len() as f64 } else { 0.0 },
            total: (elbo + signed_dr) * inv_b,
        };

        let grad = match dec_grad {
            Some(decoder) => {
                // Clamped log-variances pass no gradient.
                d_lv.zip_mut_with(&raw_lv, |g, &raw| {
                    if raw.abs() > LOG_VAR_CLAMP {
                        *g = 0.0;
                    }
                });
                let d_out = concatenate(Axis(1), &[d_mu.view(), d_lv.view()]).expect("equal heights");
                let (encoder, _) = self.encoder.backward(&enc, d_out, &[], false);
                Some(VaeGradient { encoder, decoder })
            }
            None => None,
        };
        Ok((value, grad))
    }

    pub fn apply(&mut self, grad: &VaeGradient, step: f64) {
        self.encoder.apply(&grad.encoder, step);
        self.decoder.apply(&grad.decoder, step);
    }

    pub fn to_flat(&self) -> DenseVector {
        self.encoder.to_flat().iter().chain(self.decoder.to_flat().iter()).copied().collect()
    }

    pub fn from_flat(&self, flat: &[f64]) -> VaeModel {
        let n = self.encoder.to_flat().len();
        VaeModel {
            encoder: self.encoder.from_flat(&flat[..n]),
            decoder: self.decoder.from_flat(&flat[n..]),
        }
    }
}

fn accumulate_latent(
    d_mu: &mut DenseMatrix,
    d_lv: &mut DenseMatrix,
    row: usize,
    dz: ArrayView1<f64>,
    eps: ArrayView1<f64>,
    std: ArrayView1<f64>,
) {
    for j in 0..dz.len() {
        d_mu[[row, j]] += dz[j];
        d_lv[[row, j]] += 0.5 * dz[j] * eps[j] * std[j];
    }
}

/// `z = μ + exp(½ log σ²) ⊙ ε`, `ε ~ N(0, I)`.
pub fn reparameterize(mu: ArrayView1<f64>, log_var: ArrayView1<f64>, rng: &mut RngState) -> Result<LatentSample> {
    if mu.len() != log_var.len() {
        return Err(Error::dims("reparameterize", mu.len(), log_var.len()));
    }
    let epsilon = Array1::from_shape_simple_fn(mu.len(), || rng.normal());
    let z = Array1::from_shape_fn(mu.len(), |j| {
        mu[j] + (0.5 * log_var[j].clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)).exp() * epsilon[j]
    });
    Ok(LatentSample { z, epsilon })
}

#[derive(Debug, Clone)]
pub struct VaeTraining {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub mode: DrMode,
}

/// Minibatch gradient ascent with cross-class pairs from each batch.
///
/// Each batch takes one seed from `rng`; example noise uses stream 0 and pair
/// noise stream 1, so the main stream advances identically in every mode.
/// Curve columns: `elbo` (mean per example), `dr_value`, `objective`.
pub fn train_vae(
    model: &mut VaeModel,
    data: ArrayView2<f64>,
    labels: &[usize],
    cfg: &VaeTraining,
    rng: &mut RngState,
) -> Result<LearningCurve> {
    if labels.len() != data.nrows() {
        return Err(Error::dims("training labels", data.nrows(), labels.len()));
    }
    if cfg.batch_size == 0 || data.nrows() == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("need data, batch size >= 1 and lr > 0".into()));
    }
    let distinct = labels.first().is_some_and(|&l0| labels.iter().any(|&l| l != l0));
    if cfg.alpha > 0.0 && cfg.mode != DrMode::None && !distinct {
        return Err(Error::SingleClass);
    }
    let d = model.latent_dim();
    let mut curve = LearningCurve::new(["elbo", "dr_value", "objective"]);
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let pairs: Vec<PairSet> = batches
            .iter()
            .map(|idx| match cfg.mode {
                DrMode::None => PairSet::empty(),
                _ => pairs_from_batch(&idx.iter().map(|&i| labels[i]).collect::<Vec<_>>()),
            })
            .collect();
        let (mut elbo, mut dr, mut total, mut dr_batches) = (0.0, 0.0, 0.0, 0usize);
        for (idx, batch_pairs) in batches.iter().zip(&pairs) {
            let seed = rng.next_seed();
            let mut example_rng = RngState::with_stream(seed, 0);
            let mut pair_rng = RngState::with_stream(seed, 1);
            let noise = Noise {
                examples: DenseMatrix::from_shape_simple_fn((idx.len(), d), || example_rng.normal()),
                pairs: DenseMatrix::from_shape_simple_fn((batch_pairs.len(), d), || pair_rng.normal()),
            };
            let batch = data.select(Axis(0), idx);
            let reg = Regularizer {
                mode: cfg.mode,
                alpha: cfg.alpha,
                pairs: batch_pairs,
            };
            let (value, grad) = model.objective(batch.view(), reg, &noise, true)?;
            model.apply(&grad.expect("gradient requested"), cfg.lr);
            elbo += value.elbo;
            total += value.total;
            if reg.active() {
                dr += value.dr_value;
                dr_batches += 1;
            }
        }
        curve.push(
            epoch,
            [
                elbo / data.nrows() as f64,
                dr / dr_batches.max(1) as f64,
                total / batches.len() as f64,
            ],
        )?;
    }
    Ok(curve)
}

/// Decoder means over a `steps × steps` lattice of the 2-D latent square
/// `[lo, hi]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldGrid {
    pub steps: usize,
    /// Row `i·steps + j` holds the decode of `z = (lerp(i), lerp(j))`.
    pub cells: DenseMatrix,
}

pub fn manifold_grid(model: &VaeModel, lo: f64, hi: f64, steps: usize) -> Result<ManifoldGrid> {
    if model.latent_dim() != 2 {
        return Err(Error::InvalidArgument(format!(
            "manifold grid needs a 2-D latent space, model has {}",
            model.latent_dim()
        )));
    }
    if steps < 2 {
        return Err(Error::InvalidArgument("manifold grid needs steps >= 2".into()));
    }
    let lerp = |i: usize| lo + (hi - lo) * i as f64 / (steps - 1) as f64;
    let z = DenseMatrix::from_shape_fn((steps * steps, 2), |(r, c)| {
        if c == 0 {
            lerp(r / steps)
        } else {
            lerp(r % steps)
        }
    });
    Ok(ManifoldGrid {
        steps,
        cells: model.decode(z.view())?,
    })
}

impl ManifoldGrid {
    /// Binary PGM (`P5`, maxval 255) tiling the cells as `tile_h × tile_w`
    /// images, cell `(i, j)` at tile row `i`, column `j`.
    pub fn to_pgm(&self, tile_w: usize, tile_h: usize) -> Result<Vec<u8>> {
        if tile_w * tile_h != self.cells.ncols() {
            return Err(Error::dims("manifold tile", self.cells.ncols(), tile_w * tile_h));
        }
        let (w, h) = (self.steps * tile_w, self.steps * tile_h);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        let header = out.len();
        out.resize(header + w * h, 0);
        for i in 0..self.steps {
            for j in 0..self.steps {
                let cell = self.cells.row(i * self.steps + j);
                for y in 0..tile_h {
                    for x in 0..tile_w {
                        let v = cell[y * tile_w + x].clamp(0.0, 1.0);
                        out[header + (i * tile_h + y) * w + j * tile_w + x] = (v * 255.0).round() as u8;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>, tile_w: usize, tile_h: usize) -> Result<()> {
        let bytes = self.to_pgm(tile_w, tile_h)?;
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(Error::at_path(path))?;
        f.write_all(&bytes).map_err(Error::at_path(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, FD_EPS};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn toy(seed: u64) -> (VaeModel, DenseMatrix, Vec<usize>) {
        let mut rng = RngState::new(seed);
        let model = VaeModel::new(6, 4, 2, 0.5, &mut rng);
        let batch = DenseMatrix::from_shape_simple_fn((5, 6), || rng.bernoulli(0.5));
        (model, batch, vec![0, 1, 2, 0, 1])
    }

    #[test]
    fn zero_encoder_is_prior() {
        let m = VaeModel::zeros(6, 4, 2);
        let (mu, lv) = m.encode(Array1::from_elem(6, 1.0).view()).unwrap();
        assert!(mu.iter().chain(lv.iter()).all(|&v| v == 0.0));
        assert_eq!(gaussian_kl(mu.view(), lv.view()), 0.0);
        assert!(m.encode(Array1::zeros(5).view()).is_err());
        let m = VaeModel::new(784, 600, 2, INIT_STD, &mut RngState::new(0));
        let x = Array1::from_elem(784, 0.5);
        assert_eq!(m.encode(x.view()).unwrap(), m.encode(x.view()).unwrap());
        assert_eq!(m.encode(x.view()).unwrap().0.len(), 2);
    }

    #[test]
    fn kl_closed_form() {
        assert_abs_diff_eq!(gaussian_kl(array![1.0].view(), array![0.0].view()), 0.5, epsilon = 1e-15);
        let mut rng = RngState::new(1);
        for _ in 0..1000 {
            let mu = array![3.0 * rng.normal(), rng.normal()];
            let lv = array![2.0 * rng.normal(), rng.normal()];
            assert!(gaussian_kl(mu.view(), lv.view()) >= 0.0);
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let (mu, lv) = (array![0.7, -1.2], array![-0.5, 0.4]);
        let closed = gaussian_kl(mu.view(), lv.view());
        let mut rng = RngState::new(2);
        let n = 100_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let s = reparameterize(mu.view(), lv.view(), &mut rng).unwrap();
            let mut log_ratio = 0.0;
            for j in 0..2 {
                // log Q − log P for one coordinate
                log_ratio += -0.5 * lv[j] - 0.5 * s.epsilon[j].powi(2) + 0.5 * s.z[j].powi(2);
            }
            vals.push(log_ratio);
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - closed).abs() < 3.0 * (var / n as f64).sqrt(), "{mean} vs {closed}");
    }

    #[test]
    fn reparameterize_contract() {
        let mu = array![0.3, -2.0];
        let s = reparameterize(mu.view(), array![-1e9, -1e9].view(), &mut RngState::new(3)).unwrap();
        for (z, m) in s.z.iter().zip(mu.iter()) {
            assert!((z - m).abs() < 1e-6);
        }
        let a = reparameterize(mu.view(), array![0.1, 0.2].view(), &mut RngState::new(4)).unwrap();
        let b = reparameterize(mu.view(), array![0.1, 0.2].view(), &mut RngState::new(4)).unwrap();
        assert_eq!(a, b);
        assert!(reparameterize(mu.view(), array![0.0].view(), &mut RngState::new(4)).is_err());

        let n = 100_000;
        let lv = array![0.5, -0.3];
        let mut rng = RngState::new(5);
        let mut sum = Array1::<f64>::zeros(2);
        for _ in 0..n {
            sum += &reparameterize(mu.view(), lv.view(), &mut rng).unwrap().z;
        }
        for j in 0..2 {
            let sigma = (0.5 * lv[j]).exp();
            assert!((sum[j] / n as f64 - mu[j]).abs() < 3.0 * sigma / (n as f64).sqrt());
        }
    }

    #[test]
    fn cross_entropy_coincides_with_reconstruction() {
        let (m, batch, _) = toy(6);
        let x = batch.row(0);
        let dce = m.dr_cross_entropy(x, x, &mut RngState::new(7)).unwrap();
        let (mu, lv) = m.encode(x).unwrap();
        let elbo = m.elbo(x.insert_axis(Axis(0)), &mut RngState::new(7)).unwrap();
        assert_abs_diff_eq!(dce, elbo + gaussian_kl(mu.view(), lv.view()), epsilon = 1e-12);
        assert!(dce <= 0.0);
        for seed in 0..20 {
            assert!(m.dr_cross_entropy(batch.row(1), batch.row(2), &mut RngState::new(seed)).unwrap() <= 0.0);
        }
    }

    #[test]
    fn reconstruction_l2_contract() {
        let (m, batch, _) = toy(8);
        assert_eq!(m.dr_reconstruction_l2(batch.row(0), batch.row(0), &mut RngState::new(1)).unwrap(), 0.0);
        let pq = m.dr_reconstruction_l2(batch.row(0), batch.row(1), &mut RngState::new(2)).unwrap();
        let qp = m.dr_reconstruction_l2(batch.row(1), batch.row(0), &mut RngState::new(2)).unwrap();
        assert_eq!(pq, qp);
        assert!(pq.is_finite() && (0.0..=6.0).contains(&pq));
    }

    fn fd_check(seed: u64, mode: DrMode) -> f64 {
        let (m, batch, labels) = toy(seed);
        let pairs = pairs_from_batch(&labels);
        let reg = Regularizer { mode, alpha: 0.7, pairs: &pairs };
        let noise = Noise::draw(5, pairs.len(), 2, &mut RngState::new(seed + 50));
        let (_, grad) = m.objective(batch.view(), reg, &noise, true).unwrap();
        let numeric = finite_diff_grad(
            |t| m.from_flat(t.as_slice().unwrap()).objective(batch.view(), reg, &noise, false).unwrap().0.total,
            &m.to_flat(),
            FD_EPS,
        )
        .unwrap();
        relative_error(&grad.unwrap().to_flat(), numeric.as_slice().unwrap())
    }

    #[test]
    fn frozen_noise_gradient_matches_finite_differences() {
        for seed in 0..10 {
            for mode in [DrMode::None, DrMode::CrossEntropy, DrMode::L2] {
                let rel = fd_check(seed, mode);
                assert!(rel <= 1e-4, "seed {seed} {mode:?}: rel = {rel}");
            }
        }
    }

    #[test]
    fn objective_matches_elbo_route() {
        let (m, batch, _) = toy(9);
        let noise = Noise::draw(5, 0, 2, &mut RngState::new(10));
        let (value, _) = m.objective(batch.view(), Regularizer::NONE, &noise, false).unwrap();
        let mut direct = 0.0;
        for r in 0..5 {
            let x = batch.row(r);
            let (mu, lv) = m.encode(x).unwrap();
            let z = lv.mapv(|v| (0.5 * v).exp()) * &noise.examples.row(r) + &mu;
            direct += bernoulli_log_lik(x, m.decode_logits(z.view()).unwrap().view()) - gaussian_kl(mu.view(), lv.view());
        }
        assert_abs_diff_eq!(value.elbo, direct, epsilon = 1e-10);
    }

    #[test]
    fn alpha_zero_is_plain_training() {
        let (m0, batch, labels) = toy(11);
        let cfg = |mode| VaeTraining { lr: 0.05, epochs: 10, batch_size: 3, alpha: 0.0, mode };
        let mut plain = m0.clone();
        train_vae(&mut plain, batch.view(), &labels, &cfg(DrMode::None), &mut RngState::new(12)).unwrap();
        for mode in [DrMode::CrossEntropy, DrMode::L2] {
            let mut m = m0.clone();
            train_vae(&mut m, batch.view(), &labels, &cfg(mode), &mut RngState::new(12)).unwrap();
            let same = m.to_flat().iter().zip(plain.to_flat().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{mode:?} diverged");
        }
    }

    #[test]
    fn train_requires_two_classes_with_dr() {
        let (mut m, batch, _) = toy(13);
        let cfg = VaeTraining { lr: 0.05, epochs: 1, batch_size: 5, alpha: 1.0, mode: DrMode::CrossEntropy };
        assert!(matches!(
            train_vae(&mut m, batch.view(), &[0; 5], &cfg, &mut RngState::new(1)),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn grid_contract() {
        let m = VaeModel::new(4, 3, 2, 1.0, &mut RngState::new(14));
        assert!(manifold_grid(&m, -6.0, 6.0, 1).is_err());
        let g = manifold_grid(&m, -6.0, 6.0, 2).unwrap();
        assert_eq!(g.cells.nrows(), 4);
        let corner = m.decode(array![[6.0, -6.0]].view()).unwrap();
        assert_eq!(g.cells.row(2), corner.row(0));
        let g = manifold_grid(&m, -6.0, 6.0, 5).unwrap();
        assert!(g.cells.iter().all(|v| (0.0..=1.0).contains(v)));
        let pgm = g.to_pgm(2, 2).unwrap();
        assert!(pgm.starts_with(b"P5\n10 10\n255\n"));
        assert_eq!(pgm.len(), b"P5\n10 10\n255\n".len() + 100);
        assert!(g.to_pgm(3, 2).is_err());
        let three = VaeModel::new(4, 3, 3, 1.0, &mut RngState::new(14));
        assert!(manifold_grid(&three, -6.0, 6.0, 3).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("ce".parse::<DrMode>().unwrap(), DrMode::CrossEntropy);
        assert!("kl".parse::<DrMode>().is_err());
    }
}
