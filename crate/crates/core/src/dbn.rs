//! Greedy layer-wise stacking of DR-regularized RBMs.

use ndarray::{ArrayView1, ArrayView2};

use crate::curve::LearningCurve;
use crate::dnn::{Dense, Mlp, OutputActivation};
use crate::rbm::{self, Rbm, RbmTraining};
use crate::{DenseMatrix, DenseVector, Error, Result, RngState};

/// Output layer init for fine-tuning.
pub const OUTPUT_INIT_STD: f64 = 0.01;

/// RBMs whose hidden size feeds the next layer's visible size.
#[derive(Debug, Clone, PartialEq)]
pub struct DbnStack {
    pub layers: Vec<Rbm>,
}

impl DbnStack {
    pub fn new(layers: Vec<Rbm>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].n_hidden() != w[1].n_visible() {
                return Err(Error::dims("dbn layer chaining", w[0].n_hidden(), w[1].n_visible()));
            }
        }
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `[n_visible of layer 0, n_hidden of each layer...]`
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers
            .first()
            .map(|l| l.n_visible())
            .into_iter()
            .chain(self.layers.iter().map(Rbm::n_hidden))
            .collect()
    }

    /// Mean activations after `to_layer` layers (0 returns `x`).
    pub fn propagate_up(&self, x: ArrayView1<f64>, to_layer: usize) -> Result<DenseVector> {
        let batch = self.propagate_batch(x.insert_axis(ndarray::Axis(0)), to_layer)?;
        Ok(batch.row(0).to_owned())
    }

    pub fn propagate_batch(&self, x: ArrayView2<f64>, to_layer: usize) -> Result<DenseMatrix> {
        if to_layer > self.depth() {
            return Err(Error::InvalidArgument(format!(
                "layer {to_layer} out of range for depth {}",
                self.depth()
            )));
        }
        let mut h = x.to_owned();
        for layer in &self.layers[..to_layer] {
            h = layer.hidden_probs(h.view())?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct Pretraining {
    /// Hidden sizes of the stacked RBMs, bottom to top.
    pub hidden_sizes: Vec<usize>,
    pub rbm: RbmTraining,
}

/// Trains one RBM per entry of `hidden_sizes` on mean activations of the
/// layers below, with the same labels (hence cross-class pairs) at every layer.
///
/// All layers are initialized up front, so the DR and non-DR paths start
/// from identical weights under the same seed. Returns one curve per layer.
pub fn pretrain_layerwise(
    data: ArrayView2<f64>,
    labels: &[usize],
    cfg: &Pretraining,
    rng: &mut RngState,
) -> Result<(DbnStack, Vec<LearningCurve>)> {
    if cfg.hidden_sizes.is_empty() {
        return Err(Error::InvalidArgument("need at least one hidden layer".into()));
    }
    if labels.len() != data.nrows() {
        return Err(Error::dims("pretraining labels", data.nrows(), labels.len()));
    }
    let distinct = labels.first().is_some_and(|&l0| labels.iter().any(|&l| l != l0));
    if cfg.rbm.alpha > 0.0 && !distinct {
        return Err(Error::SingleClass);
    }
    let mut visible = data.ncols();
    let mut layers = Vec::with_capacity(cfg.hidden_sizes.len());
    for &h in &cfg.hidden_sizes {
        layers.push(Rbm::random(visible, h, rng));
        visible = h;
    }
    let mut curves = Vec::with_capacity(layers.len());
    let mut repr = data.to_owned();
    for layer in layers.iter_mut() {
        curves.push(rbm::train(layer, repr.view(), labels, &cfg.rbm, rng)?);
        repr = layer.hidden_probs(repr.view())?;
    }
    Ok((DbnStack::new(layers)?, curves))
}

/// Copies the stack into a sigmoid network for discriminative fine-tuning.
///
/// Hidden layers take each RBM's weights and hidden bias. If the top RBM has
/// `n_classes` units it becomes the pre-softmax layer; otherwise a fresh
/// output layer (Gaussian std 0.01, zero bias) is appended.
pub fn export_mlp(stack: &DbnStack, n_classes: usize, rng: &mut RngState) -> Result<Mlp> {
    if stack.depth() == 0 {
        return Err(Error::InvalidArgument("cannot export an empty stack".into()));
    }
    let mut layers: Vec<Dense> = stack
        .layers
        .iter()
        .map(|r| Dense {
            weights: r.weights.clone(),
            bias: r.hidden_bias.clone(),
        })
        .collect();
    let top = stack.layers.last().unwrap().n_hidden();
    if top != n_classes {
        layers.push(Dense::random(top, n_classes, OUTPUT_INIT_STD, rng));
    }
    Mlp::from_layers(layers, OutputActivation::Softmax)
}
