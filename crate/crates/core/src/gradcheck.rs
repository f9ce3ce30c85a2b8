//! Finite-difference oracle suite over every analytic gradient.

use std::fmt;

use ndarray::Array1;

use crate::divergence::{hellinger_grad_pair, hellinger_total};
use crate::dnn::{objective, objective_gradient, DrSchedule, Mlp, Objective, OutputActivation};
use crate::numerics::{finite_diff_grad, relative_error, FD_EPS};
use crate::rbm::Rbm;
use crate::sideinfo::{pairs_from_batch, PairSet};
use crate::vae::{DrMode, Noise, Regularizer, VaeModel};
use crate::{DenseMatrix, DenseVector, Result, RngState};

pub const HELLINGER_TOLERANCE: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    /// Largest relative error seen.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} {:>5} instances  worst rel. err {:.3e}  (tol {:.0e})  {}",
            self.name,
            self.instances,
            self.worst,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn random_labels(n: usize, classes: usize, rng: &mut RngState) -> Vec<usize> {
    // The first two rows always differ so every instance has pairs.
    (0..n).map(|i| if i < 2 { i % classes.max(2) } else { rng.index(classes) }).collect()
}

fn binary(rows: usize, cols: usize, rng: &mut RngState) -> DenseMatrix {
    DenseMatrix::from_shape_simple_fn((rows, cols), || rng.bernoulli(0.5))
}

fn run(name: &'static str, instances: usize, tolerance: f64, mut one: impl FnMut(&mut RngState) -> Result<f64>, rng: &mut RngState) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let mut local = rng.fork();
        let rel = one(&mut local)?;
        // NaN must fail the gate.
        worst = if rel.is_nan() { f64::INFINITY } else { worst.max(rel) };
    }
    Ok(CheckOutcome { name, instances, worst, tolerance })
}

/// `∂D_H/∂W` of one pair through the RBM posterior.
pub fn check_hellinger(instances: usize, rng: &mut RngState) -> Result<CheckOutcome> {
    run("hellinger_grad_pair", instances, HELLINGER_TOLERANCE, |rng| {
        let (n_v, n_h) = (2 + rng.index(5), 1 + rng.index(5));
        let mut model = Rbm::random(n_v, n_h, rng);
        model.weights = rng.normal_matrix(n_v, n_h, 1.0);
        model.hidden_bias = Array1::from_shape_simple_fn(n_h, || 0.5 * rng.normal());
        let xp = Array1::from_shape_simple_fn(n_v, || rng.bernoulli(0.5));
        let xq = Array1::from_shape_simple_fn(n_v, || rng.bernoulli(0.5));
        let posterior = |w: &DenseMatrix, x: &DenseVector| {
            let mut m = model.clone();
            m.weights = w.clone();
            m.mean_field_posterior(x.view())
        };
        let analytic = hellinger_grad_pair(
            xp.view(),
            xq.view(),
            &posterior(&model.weights, &xp)?,
            &posterior(&model.weights, &xq)?,
        )?;
        let flat = DenseVector::from_iter(model.weights.iter().copied());
        let numeric = finite_diff_grad(
            |t| {
                let w = DenseMatrix::from_shape_vec((n_v, n_h), t.to_vec()).expect("shape");
                hellinger_total(&posterior(&w, &xp).expect("dims"), &posterior(&w, &xq).expect("dims")).expect("dims")
            },
            &flat,
            FD_EPS,
        )?;
        Ok(relative_error(analytic.as_slice().expect("contiguous"), numeric.as_slice().expect("contiguous")))
    }, rng)
}

/// RBM DR gradient over all parameters of a batch with cross-class pairs.
pub fn check_rbm_dr(instances: usize, rng: &mut RngState) -> Result<CheckOutcome> {
    run("rbm dr_gradient", instances, TOLERANCE, |rng| {
        let (n_v, n_h, b) = (2 + rng.index(5), 1 + rng.index(4), 3 + rng.index(5));
        let mut model = Rbm::random(n_v, n_h, rng);
        model.weights = rng.normal_matrix(n_v, n_h, 1.0);
        model.hidden_bias = Array1::from_shape_simple_fn(n_h, || 0.5 * rng.normal());
        model.visible_bias = Array1::from_shape_simple_fn(n_v, || 0.5 * rng.normal());
        let batch = binary(b, n_v, rng);
        let pairs = pairs_from_batch(&random_labels(b, 3, rng));
        let analytic = model.dr_gradient(batch.view(), &pairs)?.to_flat();
        let numeric = finite_diff_grad(
            |t| 2.0 * model.from_flat(t.as_slice().expect("contiguous")).dr_value(batch.view(), &pairs).expect("dims"),
            &model.to_flat(),
            FD_EPS,
        )?;
        Ok(relative_error(&analytic, numeric.as_slice().expect("contiguous")))
    }, rng)
}

/// Full classifier objective (cross-entropy, layer DR, weight penalty).
pub fn check_dnn(instances: usize, rng: &mut RngState) -> Result<CheckOutcome> {
    run("dnn objective (with DR)", instances, TOLERANCE, |rng| {
        let depth = 1 + rng.index(3);
        let mut sizes = vec![2 + rng.index(4)];
        sizes.extend((0..depth).map(|_| 2 + rng.index(3)));
        let classes = 2 + rng.index(3);
        sizes.push(classes);
        let model = Mlp::random(&sizes, 1.0, OutputActivation::Softmax, rng);
        let b = 3 + rng.index(5);
        let batch = DenseMatrix::from_shape_simple_fn((b, sizes[0]), || rng.uniform());
        let labels = random_labels(b, classes, rng);
        let pairs = pairs_from_batch(&labels);
        let scales: Vec<f64> = (0..depth).map(|_| rng.uniform() * 2.0).collect();
        let schedule = DrSchedule::new(0.1 + rng.uniform(), 0.9)?.with_layer_scales(scales)?;
        let obj = Objective {
            pairs: &pairs,
            schedule: &schedule,
            epoch: rng.index(3),
            weight_penalty: 0.01 * rng.uniform(),
        };
        let (grad, _) = objective_gradient(&model, batch.view(), &labels, &obj)?;
        let numeric = finite_diff_grad(
            |t| objective(&model.from_flat(t.as_slice().expect("contiguous")), batch.view(), &labels, &obj).expect("dims"),
            &model.to_flat(),
            FD_EPS,
        )?;
        Ok(relative_error(&grad.to_flat(), numeric.as_slice().expect("contiguous")))
    }, rng)
}

/// VAE objective with frozen reparameterization noise, alternating DR modes.
pub fn check_vae(instances: usize, rng: &mut RngState) -> Result<CheckOutcome> {
    let mut count = 0usize;
    run("vae objective (frozen)", instances, TOLERANCE, |rng| {
        let mode = [DrMode::None, DrMode::CrossEntropy, DrMode::L2][count % 3];
        count += 1;
        let (input, hidden, latent) = (3 + rng.index(4), 2 + rng.index(3), 1 + rng.index(2));
        let model = VaeModel::new(input, hidden, latent, 0.5, rng);
        let b = 3 + rng.index(4);
        let batch = binary(b, input, rng);
        let pairs = match mode {
            DrMode::None => PairSet::empty(),
            _ => pairs_from_batch(&random_labels(b, 3, rng)),
        };
        let reg = Regularizer { mode, alpha: 0.1 + rng.uniform(), pairs: &pairs };
        let noise = Noise::draw(b, pairs.len(), latent, rng);
        let (_, grad) = model.objective(batch.view(), reg, &noise, true)?;
        let numeric = finite_diff_grad(
            |t| {
                model
                    .from_flat(t.as_slice().expect("contiguous"))
                    .objective(batch.view(), reg, &noise, false)
                    .expect("dims")
                    .0
                    .total
            },
            &model.to_flat(),
            FD_EPS,
        )?;
        Ok(relative_error(&grad.expect("requested").to_flat(), numeric.as_slice().expect("contiguous")))
    }, rng)
}

/// All four families, `instances` each.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = RngState::new(seed);
    Ok(vec![
        check_hellinger(instances, &mut rng)?,
        check_rbm_dr(instances, &mut rng)?,
        check_dnn(instances, &mut rng)?,
        check_vae(instances, &mut rng)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        for outcome in run_suite(10, 3).unwrap() {
            assert!(outcome.passed(), "{outcome}");
            assert_eq!(outcome.instances, 10);
        }
    }

    #[test]
    fn nan_fails_the_gate() {
        let o = run("nan", 1, 1.0, |_| Ok(f64::NAN), &mut RngState::new(0)).unwrap();
        assert!(!o.passed());
    }
}
