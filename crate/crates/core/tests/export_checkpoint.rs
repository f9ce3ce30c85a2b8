//! A pretrained stack exported for fine-tuning survives checkpointing.

use divreg::checkpoint::{decode, encode, Model};
use divreg::dbn::{export_mlp, pretrain_layerwise, Pretraining};
use divreg::rbm::RbmTraining;
use divreg::{DenseMatrix, RngState};

#[test]
fn export_then_checkpoint_round_trips() {
    let mut rng = RngState::new(1);
    let x = DenseMatrix::from_shape_simple_fn((30, 8), || rng.bernoulli(0.4));
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let cfg = Pretraining {
        hidden_sizes: vec![6, 4],
        rbm: RbmTraining { lr: 0.1, alpha: 2.0, k: 1, epochs: 3, batch_size: 10 },
    };
    let (stack, _) = pretrain_layerwise(x.view(), &labels, &cfg, &mut rng).unwrap();
    let mlp = export_mlp(&stack, 3, &mut rng).unwrap();
    // Values already at f32 precision come back exactly.
    let once = decode(&encode(&Model::Mlp(mlp)).unwrap()).unwrap();
    let twice = decode(&encode(&once).unwrap()).unwrap();
    assert_eq!(once, twice);
    let Model::Mlp(m) = once else { panic!("kind changed") };
    assert_eq!(m.sizes(), [8, 6, 4, 3]);
}
