//! Fully connected sigmoid networks trained by backprop on cross-entropy
//! minus a per-layer diversifying term.
//!
//! Batch objective:
//!
//! ```text
//! J = (1/B)·[ Σ_b CE(G(x_b), y_b) − Σ_l α_l·D̄_l ] + ω·Σ‖W‖²
//! D̄_l = (1/(P·n_l))·Σ_pairs ‖h_p^l − h_q^l‖²
//! ```
//!
//! over the `B` rows and `P` pairs of a batch, with `l` ranging over hidden
//! layers only, `n_l` the width of layer `l`, and `α_l = α₀·decay^epoch·scale_l`.
//! `D̄_l` is a mean, so the DR strength does not depend on pair density.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};

use crate::curve::LearningCurve;
use crate::data::LabeledDataset;
use crate::numerics::sigmoid;
use crate::parallel::map_chunks;
use crate::sideinfo::{pairs_from_batch, PairSet};
use crate::{DenseMatrix, DenseVector, Error, Result, RngState};

pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `inputs × outputs`
    pub weights: DenseMatrix,
    pub bias: DenseVector,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros((inputs, outputs)),
            bias: DenseVector::zeros(outputs),
        }
    }

    pub fn random(inputs: usize, outputs: usize, std: f64, rng: &mut RngState) -> Self {
        Self {
            weights: rng.normal_matrix(inputs, outputs, std),
            bias: DenseVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    fn affine(&self, x: ArrayView2<f64>) -> DenseMatrix {
        x.dot(&self.weights) + &self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Softmax,
    Identity,
    Sigmoid,
}

/// Logistic hidden layers followed by an output layer with its own activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output: OutputActivation,
}

/// Cached activations of a batch forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub input: DenseMatrix,
    /// `h¹ … h^{L−1}`
    pub hidden: Vec<DenseMatrix>,
    /// Output pre-activations.
    pub logits: DenseMatrix,
    pub output: DenseMatrix,
}

impl ForwardPass {
    /// Activation feeding layer `k` (`0` is the input).
    fn layer_input(&self, k: usize) -> &DenseMatrix {
        if k == 0 {
            &self.input
        } else {
            &self.hidden[k - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient {
    pub layers: Vec<Dense>,
}

impl MlpGradient {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            layers: model.layers.iter().map(|l| Dense::zeros(l.inputs(), l.outputs())).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn add_assign(&mut self, other: &MlpGradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
        .collect()
}

fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

impl Mlp {
    /// Layer sizes `[input, hidden..., output]`.
    pub fn zeros(sizes: &[usize], output: OutputActivation) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            output,
        }
    }

    /// Gaussian weights with standard deviation `std`, zero biases.
    pub fn random(sizes: &[usize], std: f64, output: OutputActivation, rng: &mut RngState) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| Dense::random(w[0], w[1], std, rng)).collect(),
            output,
        }
    }

    pub fn from_layers(layers: Vec<Dense>, output: OutputActivation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].outputs() != w[1].inputs() || w[0].outputs() != w[0].bias.len() {
                return Err(Error::dims("layer chaining", w[0].outputs(), w[1].inputs()));
            }
        }
        Ok(Self { layers, output })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::outputs))
            .collect()
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<ForwardPass> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dims("network input", self.input_dim(), x.ncols()));
        }
        let (last, hidden_layers) = self.layers.split_last().expect("nonempty network");
        let mut hidden = Vec::with_capacity(hidden_layers.len());
        for layer in hidden_layers {
            let prev = hidden.last().map_or(x, |h: &DenseMatrix| h.view());
            let mut a = layer.affine(prev);
            a.mapv_inplace(sigmoid);
            hidden.push(a);
        }
        let logits = last.affine(hidden.last().map_or(x, |h| h.view()));
        let output = match self.output {
            OutputActivation::Softmax => softmax_rows(&logits),
            OutputActivation::Identity => logits.clone(),
            OutputActivation::Sigmoid => logits.mapv(sigmoid),
        };
        Ok(ForwardPass {
            input: x.to_owned(),
            hidden,
            logits,
            output,
        })
    }

    /// Single-example forward pass with every activation cached.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<ForwardPass> {
        self.forward_batch(x.insert_axis(Axis(0)))
    }

    /// Backpropagates `d_logits` (gradient w.r.t. output pre-activations) and
    /// optional extra gradients w.r.t. each hidden activation.
    ///
    /// Returns the parameter gradient and, if `want_input_grad`, the gradient
    /// w.r.t. the input batch.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_logits: DenseMatrix,
        hidden_extra: &[Option<DenseMatrix>],
        want_input_grad: bool,
    ) -> (MlpGradient, Option<DenseMatrix>) {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut dz = d_logits;
        let mut input_grad = None;
        for k in (0..self.layers.len()).rev() {
            let a_in = pass.layer_input(k);
            grads.push(Dense {
                weights: a_in.t().dot(&dz),
                bias: dz.sum_axis(Axis(0)),
            });
            if k > 0 {
                let mut da = dz.dot(&self.layers[k].weights.t());
                if let Some(Some(extra)) = hidden_extra.get(k - 1) {
                    da += extra;
                }
                da.zip_mut_with(a_in, |d, &h| *d *= h * (1.0 - h));
                dz = da;
            } else if want_input_grad {
                input_grad = Some(dz.dot(&self.layers[0].weights.t()));
            }
        }
        grads.reverse();
        (MlpGradient { layers: grads }, input_grad)
    }

    /// `θ ← θ + step·grad`
    pub fn apply(&mut self, grad: &MlpGradient, step: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            l.weights.scaled_add(step, &g.weights);
            l.bias.scaled_add(step, &g.bias);
        }
    }

    /// Per layer: weights row-major, then bias.
    pub fn to_flat(&self) -> DenseVector {
        Array1::from(flatten(&self.layers))
    }

    pub fn from_flat(&self, flat: &[f64]) -> Mlp {
        let mut offset = 0;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (r, c) = l.weights.dim();
                let w = DenseMatrix::from_shape_vec((r, c), flat[offset..offset + r * c].to_vec()).expect("shape");
                offset += r * c;
                let b = Array1::from(flat[offset..offset + c].to_vec());
                offset += c;
                Dense { weights: w, bias: b }
            })
            .collect();
        assert_eq!(offset, flat.len(), "flat parameter length");
        Mlp { layers, output: self.output }
    }

    /// Predicted class (argmax, lowest index on ties) for every row.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        let pass = self.forward_batch(x)?;
        Ok(pass.logits.rows().into_iter().map(argmax).collect())
    }
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `‖a − b‖²`
pub fn dr_layer_penalty(h_p: ArrayView1<f64>, h_q: ArrayView1<f64>) -> Result<f64> {
    if h_p.len() != h_q.len() {
        return Err(Error::dims("layer penalty", h_p.len(), h_q.len()));
    }
    Ok(squared_distance(h_p, h_q))
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-layer DR weights with multiplicative per-epoch decay.
#[derive(Debug, Clone, PartialEq)]
pub struct DrSchedule {
    pub alpha0: f64,
    pub decay: f64,
    /// Multiplier per hidden layer; empty means 1 everywhere.
    pub per_layer_scale: Vec<f64>,
}

impl DrSchedule {
    pub fn new(alpha0: f64, decay: f64) -> Result<Self> {
        if !(alpha0 >= 0.0) || !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need alpha0 >= 0 and decay in (0, 1], got {alpha0}, {decay}"
            )));
        }
        Ok(Self {
            alpha0,
            decay,
            per_layer_scale: Vec::new(),
        })
    }

    pub fn off() -> Self {
        Self {
            alpha0: 0.0,
            decay: 1.0,
            per_layer_scale: Vec::new(),
        }
    }

    pub fn with_layer_scales(mut self, scales: Vec<f64>) -> Result<Self> {
        if scales.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidArgument("layer scales must be >= 0".into()));
        }
        self.per_layer_scale = scales;
        Ok(self)
    }

    /// `α₀ · decay^epoch`
    pub fn effective_alpha(&self, epoch: usize) -> f64 {
        self.alpha0 * self.decay.powi(epoch as i32)
    }

    /// `α_l` for hidden layer `layer` (0-based).
    pub fn layer_alpha(&self, epoch: usize, layer: usize) -> f64 {
        let scale = if self.per_layer_scale.is_empty() {
            1.0
        } else {
            self.per_layer_scale.get(layer).copied().unwrap_or(0.0)
        };
        self.effective_alpha(epoch) * scale
    }

    pub fn is_off(&self) -> bool {
        self.alpha0 == 0.0
    }
}

/// Everything the objective needs besides the data.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub pairs: &'a PairSet,
    pub schedule: &'a DrSchedule,
    pub epoch: usize,
    /// Coefficient ω of the squared weight norm (default 0).
    pub weight_penalty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// Mean cross-entropy over the batch.
    pub cost: f64,
    /// Mean over pairs of `Σ_l ‖h_p^l − h_q^l‖²` (unweighted; 0 without pairs).
    pub dr_value: f64,
    pub objective: f64,
    pub pairs: usize,
}

fn check_batch(model: &Mlp, batch: ArrayView2<f64>, labels: &[usize], pairs: &PairSet) -> Result<()> {
    if labels.len() != batch.nrows() {
        return Err(Error::dims("batch labels", batch.nrows(), labels.len()));
    }
    if batch.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.output_dim()) {
        return Err(Error::InvalidLabel {
            label: bad,
            n_classes: model.output_dim(),
        });
    }
    pairs.check_bounds(batch.nrows())
}

fn cross_entropy_sum(logits: &DenseMatrix, labels: &[usize]) -> f64 {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| crate::numerics::log_sum_exp(row.iter().copied()) - row[y])
        .sum()
}

/// Weight of one squared distance at layer `l` in `J`.
fn pair_weight(obj: &Objective<'_>, l: usize, width: usize, rows: usize) -> f64 {
    obj.schedule.layer_alpha(obj.epoch, l) / (obj.pairs.len() * width * rows) as f64
}

/// Returns `((1/B)·Σ_l α_l·D̄_l, Σ_pairs Σ_l D₂)`.
fn pair_terms(pass: &ForwardPass, obj: &Objective<'_>, rows: usize) -> (f64, f64) {
    let (mut weighted, mut raw) = (0.0, 0.0);
    if obj.pairs.is_empty() {
        return (0.0, 0.0);
    }
    for (l, h) in pass.hidden.iter().enumerate() {
        let w = pair_weight(obj, l, h.ncols(), rows);
        for (p, q) in obj.pairs.iter() {
            let d = squared_distance(h.row(p), h.row(q));
            weighted += w * d;
            raw += d;
        }
    }
    (weighted, raw)
}

fn weight_norm(model: &Mlp) -> f64 {
    model.layers.iter().map(|l| l.weights.iter().map(|w| w * w).sum::<f64>()).sum()
}

fn evaluate_objective(model: &Mlp, pass: &ForwardPass, labels: &[usize], obj: &Objective<'_>) -> StepMetrics {
    let b = labels.len() as f64;
    let ce = cross_entropy_sum(&pass.logits, labels);
    let (weighted, raw) = pair_terms(pass, obj, labels.len());
    let mut objective = ce / b - weighted;
    if obj.weight_penalty != 0.0 {
        objective += obj.weight_penalty * weight_norm(model);
    }
    StepMetrics {
        cost: ce / b,
        dr_value: if obj.pairs.is_empty() { 0.0 } else { raw / obj.pairs.len() as f64 },
        objective,
        pairs: obj.pairs.len(),
    }
}

/// Value of `J` on a batch.
pub fn objective(model: &Mlp, batch: ArrayView2<f64>, labels: &[usize], obj: &Objective<'_>) -> Result<f64> {
    check_batch(model, batch, labels, obj.pairs)?;
    let pass = model.forward_batch(batch)?;
    Ok(evaluate_objective(model, &pass, labels, obj).objective)
}

/// `∂J/∂θ` together with the batch metrics.
pub fn objective_gradient(
    model: &Mlp,
    batch: ArrayView2<f64>,
    labels: &[usize],
    obj: &Objective<'_>,
) -> Result<(MlpGradient, StepMetrics)> {
    check_batch(model, batch, labels, obj.pairs)?;
    if model.output != OutputActivation::Softmax {
        return Err(Error::InvalidArgument("classifier needs a softmax output".into()));
    }
    let pass = model.forward_batch(batch)?;
    let metrics = evaluate_objective(model, &pass, labels, obj);
    let b = labels.len() as f64;

    let mut d_logits = pass.output.clone();
    for (mut row, &y) in d_logits.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    d_logits /= b;

    // −α_l‖h_p − h_q‖² injects gradient directly at every hidden layer.
    let extra: Vec<Option<DenseMatrix>> = pass
        .hidden
        .iter()
        .enumerate()
        .map(|(l, h)| {
            if obj.pairs.is_empty() || obj.schedule.layer_alpha(obj.epoch, l) == 0.0 {
                return None;
            }
            let mut g = DenseMatrix::zeros(h.raw_dim());
            let coef = 2.0 * pair_weight(obj, l, h.ncols(), labels.len());
            for (p, q) in obj.pairs.iter() {
                let diff = &h.row(p) - &h.row(q);
                g.row_mut(p).scaled_add(-coef, &diff);
                g.row_mut(q).scaled_add(coef, &diff);
            }
            Some(g)
        })
        .collect();

    let (mut grad, _) = model.backward(&pass, d_logits, &extra, false);
    if obj.weight_penalty != 0.0 {
        for (g, l) in grad.layers.iter_mut().zip(&model.layers) {
            g.weights.scaled_add(2.0 * obj.weight_penalty, &l.weights);
        }
    }
    Ok((grad, metrics))
}

/// One gradient-descent step `θ ← θ − lr·∂J/∂θ`.
pub fn backprop_step(
    model: &mut Mlp,
    batch: ArrayView2<f64>,
    labels: &[usize],
    obj: &Objective<'_>,
    lr: f64,
) -> Result<StepMetrics> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    let (grad, metrics) = objective_gradient(model, batch, labels, obj)?;
    model.apply(&grad, -lr);
    Ok(metrics)
}

/// Fraction of misclassified rows.
pub fn evaluate(model: &Mlp, inputs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if inputs.nrows() == 0 {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    if labels.len() != inputs.nrows() {
        return Err(Error::dims("evaluation labels", inputs.nrows(), labels.len()));
    }
    let wrong = map_chunks(inputs.nrows(), 512, |range| -> Result<usize> {
        let preds = model.predict(inputs.slice(ndarray::s![range.clone(), ..]))?;
        Ok(preds.iter().zip(&labels[range]).filter(|(p, y)| p != y).count())
    });
    let mut total = 0;
    for w in wrong {
        total += w?;
    }
    Ok(total as f64 / inputs.nrows() as f64)
}

/// Minibatch training schedule for a classifier.
#[derive(Debug, Clone)]
pub struct ClassifierTraining {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: DrSchedule,
    pub weight_penalty: f64,
    pub side_info: SideInfo,
}

/// Where each minibatch's pairs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SideInfo {
    /// Pairs of the global set with both endpoints in the batch.
    Global,
    /// Every cross-class pair inside the batch; the global set is ignored.
    Batch,
}

/// Trains on `train`, scoring `test` after each epoch.
///
/// With [`SideInfo::Global`], `pairs` index `train` and each minibatch uses
/// the pairs whose two endpoints both fall into it; with [`SideInfo::Batch`]
/// the pairs of every batch are rebuilt from its labels each epoch. Curve columns: `effective_alpha, dr_value,
/// cost, test_error`, where `cost` and `dr_value` average the epoch's batches.
pub fn train_classifier(
    model: &mut Mlp,
    train: &LabeledDataset,
    test: &LabeledDataset,
    pairs: &PairSet,
    cfg: &ClassifierTraining,
    rng: &mut RngState,
) -> Result<LearningCurve> {
    train_classifier_with(model, train, test, pairs, cfg, rng, |_, _| true)
}

/// As [`train_classifier`]; `keep_going(epoch, test_error)` is called after
/// each epoch and stops training by returning false.
pub fn train_classifier_with(
    model: &mut Mlp,
    train: &LabeledDataset,
    test: &LabeledDataset,
    pairs: &PairSet,
    cfg: &ClassifierTraining,
    rng: &mut RngState,
    mut keep_going: impl FnMut(usize, f64) -> bool,
) -> Result<LearningCurve> {
    if cfg.batch_size == 0 || train.is_empty() {
        return Err(Error::InvalidArgument("need a nonempty dataset and batch size".into()));
    }
    pairs.check_bounds(train.len())?;
    let mut curve = LearningCurve::new(["effective_alpha", "dr_value", "cost", "test_error"]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
        let local = match (cfg.schedule.is_off(), cfg.side_info) {
            (true, _) => vec![PairSet::empty(); batches.len()],
            (false, SideInfo::Global) => pairs.restrict_to_batches(train.len(), &batches),
            (false, SideInfo::Batch) => batches
                .iter()
                .map(|idx| pairs_from_batch(&idx.iter().map(|&i| train.labels[i]).collect::<Vec<_>>()))
                .collect(),
        };
        let (mut cost, mut dr, mut dr_batches) = (0.0, 0.0, 0usize);
        for (idx, batch_pairs) in batches.iter().zip(&local) {
            let x = train.inputs.select(Axis(0), idx);
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let obj = Objective {
                pairs: batch_pairs,
                schedule: &cfg.schedule,
                epoch,
                weight_penalty: cfg.weight_penalty,
            };
            let m = backprop_step(model, x.view(), &y, &obj, cfg.lr)?;
            cost += m.cost;
            if m.pairs > 0 {
                dr += m.dr_value;
                dr_batches += 1;
            }
        }
        let test_error = evaluate(model, test.inputs.view(), &test.labels)?;
        curve.push(
            epoch,
            [
                cfg.schedule.effective_alpha(epoch),
                dr / dr_batches.max(1) as f64,
                cost / batches.len() as f64,
                test_error,
            ],
        )?;
        if !keep_going(epoch, test_error) {
            break;
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, FD_EPS};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn toy_batch(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
        let mut rng = RngState::new(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.uniform())
    }

    #[test]
    fn zero_network_is_uniform() {
        let m = Mlp::zeros(&[784, 30, 20, 10], OutputActivation::Softmax);
        let pass = m.forward(Array1::from_elem(784, 0.3).view()).unwrap();
        assert!(pass.hidden.iter().all(|h| h.iter().all(|&v| v == 0.5)));
        assert!(pass.output.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        assert!(m.forward(Array1::zeros(3).view()).is_err());
    }

    #[test]
    fn softmax_normalized_and_single_layer_regression() {
        let mut rng = RngState::new(1);
        let m = Mlp::random(&[5, 4, 3], 1.0, OutputActivation::Softmax, &mut rng);
        let x = toy_batch(2, 20, 5);
        let pass = m.forward_batch(x.view()).unwrap();
        for row in pass.output.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }

        let lr = Mlp::random(&[5, 3], 1.0, OutputActivation::Softmax, &mut rng);
        let out = lr.forward_batch(x.view()).unwrap().output;
        for (r, xr) in x.rows().into_iter().enumerate() {
            let z: Vec<f64> = (0..3).map(|c| xr.dot(&lr.layers[0].weights.column(c)) + lr.layers[0].bias[c]).collect();
            let norm: f64 = z.iter().map(|v| v.exp()).sum();
            for c in 0..3 {
                assert_abs_diff_eq!(out[[r, c]], z[c].exp() / norm, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn layer_penalty_examples() {
        assert_eq!(dr_layer_penalty(array![0.3, 0.2].view(), array![0.3, 0.2].view()).unwrap(), 0.0);
        assert_eq!(dr_layer_penalty(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap(), 2.0);
        assert!(dr_layer_penalty(array![1.0].view(), array![0.0, 1.0].view()).is_err());
    }

    #[test]
    fn schedule_decay() {
        let s = DrSchedule::new(50.0, 0.9).unwrap();
        assert_eq!(s.effective_alpha(0), 50.0);
        assert_abs_diff_eq!(s.effective_alpha(1), 45.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.effective_alpha(2), 40.5, epsilon = 1e-12);
        let scaled = s.clone().with_layer_scales(vec![0.5, 2.0]).unwrap();
        assert_eq!(scaled.layer_alpha(0, 1), 100.0);
        assert!(DrSchedule::new(1.0, 0.0).is_err());
        assert!(DrSchedule::new(-1.0, 0.5).is_err());
    }

    #[test]
    fn zero_schedule_is_plain_cross_entropy() {
        let mut rng = RngState::new(3);
        let m = Mlp::random(&[4, 3, 2], 0.5, OutputActivation::Softmax, &mut rng);
        let x = toy_batch(4, 6, 4);
        let labels = [0, 1, 0, 1, 1, 0];
        let pairs = crate::sideinfo::pairs_from_batch(&labels);
        let off = DrSchedule::off();
        let obj = Objective { pairs: &pairs, schedule: &off, epoch: 0, weight_penalty: 0.0 };
        let j = objective(&m, x.view(), &labels, &obj).unwrap();
        let probs = m.forward_batch(x.view()).unwrap().output;
        let ce: f64 = labels.iter().enumerate().map(|(r, &y)| -probs[[r, y]].ln()).sum::<f64>() / 6.0;
        assert_abs_diff_eq!(j, ce, epsilon = 1e-12);
    }

    fn fd_instance(seed: u64, weight_penalty: f64) -> f64 {
        let mut rng = RngState::new(seed);
        let m = Mlp::random(&[4, 2, 2], 1.0, OutputActivation::Softmax, &mut rng);
        let x = toy_batch(seed + 1000, 6, 4);
        let labels = [0, 1, 1, 0, 1, 0];
        let pairs = PairSet::from_pairs(vec![(0, 1), (2, 3), (4, 5)], &labels).unwrap();
        let sched = DrSchedule::new(2.0 + rng.uniform(), 0.9).unwrap();
        let obj = Objective { pairs: &pairs, schedule: &sched, epoch: 1, weight_penalty };
        let (grad, _) = objective_gradient(&m, x.view(), &labels, &obj).unwrap();
        let numeric = finite_diff_grad(
            |t| objective(&m.from_flat(t.as_slice().unwrap()), x.view(), &labels, &obj).unwrap(),
            &m.to_flat(),
            FD_EPS,
        )
        .unwrap();
        relative_error(&grad.to_flat(), numeric.as_slice().unwrap())
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let rel = fd_instance(seed, 0.0);
            assert!(rel <= 1e-4, "seed {seed}: rel = {rel}");
        }
        assert!(fd_instance(99, 0.05) <= 1e-4);
    }

    #[test]
    fn evaluate_tie_break_and_perfect_model() {
        let m = Mlp::zeros(&[3, 4], OutputActivation::Softmax);
        let x = toy_batch(5, 10, 3);
        let labels = [0, 1, 2, 3, 0, 0, 1, 2, 3, 3];
        // Uniform output predicts class 0 everywhere.
        assert_abs_diff_eq!(evaluate(&m, x.view(), &labels).unwrap(), 1.0 - 0.3, epsilon = 1e-15);

        // One-hot inputs with an identity-like readout are memorized.
        let mut id = Mlp::zeros(&[4, 4], OutputActivation::Softmax);
        id.layers[0].weights = Array2::eye(4) * 10.0;
        let eye = Array2::eye(4);
        assert_eq!(evaluate(&id, eye.view(), &[0, 1, 2, 3]).unwrap(), 0.0);
        assert!(evaluate(&id, Array2::zeros((0, 4)).view(), &[]).is_err());
    }

    #[test]
    fn alpha_zero_steps_match_plain_backprop() {
        let mut rng = RngState::new(6);
        let mut a = Mlp::random(&[5, 4, 3, 2], 0.1, OutputActivation::Softmax, &mut rng);
        let mut b = a.clone();
        let x = toy_batch(7, 8, 5);
        let labels = [0, 1, 0, 1, 0, 1, 1, 0];
        let pairs = crate::sideinfo::pairs_from_batch(&labels);
        let zero = DrSchedule::new(0.0, 0.9).unwrap();
        let off = DrSchedule::off();
        let none = PairSet::empty();
        for epoch in 0..10 {
            let with = Objective { pairs: &pairs, schedule: &zero, epoch, weight_penalty: 0.0 };
            let without = Objective { pairs: &none, schedule: &off, epoch, weight_penalty: 0.0 };
            backprop_step(&mut a, x.view(), &labels, &with, 1.0).unwrap();
            backprop_step(&mut b, x.view(), &labels, &without, 1.0).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        let mut m = Mlp::zeros(&[2, 2], OutputActivation::Softmax);
        let x = array![[0.1, 0.2]];
        let off = DrSchedule::off();
        let bad_pairs = PairSet::from_pairs(vec![(0, 1)], &[0, 1]).unwrap();
        let obj = Objective { pairs: &bad_pairs, schedule: &off, epoch: 0, weight_penalty: 0.0 };
        assert!(matches!(objective(&m, x.view(), &[0], &obj), Err(Error::InvalidPair { .. })));
        let none = PairSet::empty();
        let obj = Objective { pairs: &none, schedule: &off, epoch: 0, weight_penalty: 0.0 };
        assert!(matches!(objective(&m, x.view(), &[5], &obj), Err(Error::InvalidLabel { .. })));
        assert!(backprop_step(&mut m, x.view(), &[0], &obj, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_logit_shift(shift in -20.0f64..20.0, seed in 0u64..1000) {
            let mut rng = RngState::new(seed);
            let mut m = Mlp::random(&[3, 4, 5], 1.0, OutputActivation::Softmax, &mut rng);
            let x = toy_batch(seed, 6, 3);
            let before = m.predict(x.view()).unwrap();
            m.layers[1].bias.mapv_inplace(|b| b + shift);
            prop_assert_eq!(before, m.predict(x.view()).unwrap());
        }

        #[test]
        fn cross_entropy_non_negative(seed in 0u64..1000) {
            let mut rng = RngState::new(seed);
            let m = Mlp::random(&[3, 4, 5], 2.0, OutputActivation::Softmax, &mut rng);
            let x = toy_batch(seed, 4, 3);
            let logits = m.forward_batch(x.view()).unwrap().logits;
            prop_assert!(cross_entropy_sum(&logits, &[0, 1, 2, 3]) >= 0.0);
        }
    }
}
