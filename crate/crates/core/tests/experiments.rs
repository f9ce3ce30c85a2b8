//! End-to-end runs of every experiment kind on synthetic data.

use std::fs;
use std::path::Path;

use divreg::checkpoint::{self, Model};
use divreg::config::{DatasetKind, ExperimentConfig, ExperimentKind};
use divreg::experiment::run;

fn blobs(kind: ExperimentKind, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(kind, 11);
    cfg.output_dir = dir.to_path_buf();
    cfg.dataset = DatasetKind::Blobs;
    cfg.blob_per_class = 20;
    cfg.blob_test_per_class = 10;
    cfg.blob_dim = 9;
    cfg.epochs = 4;
    cfg.finetune_epochs = 3;
    cfg.batch_size = 10;
    cfg.hidden = vec![6, 4];
    cfg.global_pairs = 300;
    if kind == ExperimentKind::TrainVae {
        cfg.hidden = vec![5];
        cfg.grid_steps = 3;
        cfg.alpha = 0.5;
    }
    cfg
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn train_dnn_writes_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    let report = run(&blobs(ExperimentKind::TrainDnn, dir.path())).unwrap();
    let (dr, no) = (read(dir.path(), "dr.csv"), read(dir.path(), "no-dr.csv"));
    assert!(dr.starts_with("epoch,effective_alpha,dr_value,cost,test_error\n"));
    assert_eq!(dr.lines().count(), no.lines().count());
    assert_eq!(dr.lines().count(), 5);
    assert_eq!(
        fs::read(dir.path().join("dr-init.drn")).unwrap(),
        fs::read(dir.path().join("no-dr-init.drn")).unwrap()
    );
    assert!(checkpoint::load_mlp(dir.path().join("dr-final.drn")).is_ok());
    assert!(read(dir.path(), "timings.txt").lines().count() == 2);
    assert!(report.curve("dr").is_some() && report.curve("no-dr").is_some());
    let cfg = ExperimentConfig::parse(&read(dir.path(), "config.txt"), &[]).unwrap();
    assert_eq!(cfg, blobs(ExperimentKind::TrainDnn, dir.path()));
}

#[test]
fn reruns_are_byte_identical() {
    for kind in [ExperimentKind::TrainDnn, ExperimentKind::PretrainDbn, ExperimentKind::TrainVae] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = run(&blobs(kind, a.path())).unwrap();
        run(&blobs(kind, b.path())).unwrap();
        for (stem, _) in &first.curves {
            let name = format!("{stem}.csv");
            assert_eq!(read(a.path(), &name), read(b.path(), &name), "{kind} {name}");
        }
    }
}

#[test]
fn pretrain_dbn_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    run(&blobs(ExperimentKind::PretrainDbn, dir.path())).unwrap();
    for arm in ["dr", "no-dr"] {
        for l in 0..2 {
            assert!(read(dir.path(), &format!("{arm}-pretrain-layer{l}.csv")).starts_with("epoch,pll,dr_value\n"));
        }
        let stack = checkpoint::load_dbn(dir.path().join(format!("{arm}-stack.drn"))).unwrap();
        assert_eq!(stack.layer_sizes(), [9, 6, 4]);
        let ft = read(dir.path(), &format!("{arm}-finetune.csv"));
        assert_eq!(ft.lines().count(), 4);
        let tuned = checkpoint::load_mlp(dir.path().join(format!("{arm}-finetuned.drn"))).unwrap();
        assert_eq!(tuned.sizes(), [9, 6, 4, 3]);
    }
}

#[test]
fn train_vae_emits_manifold() {
    let dir = tempfile::tempdir().unwrap();
    run(&blobs(ExperimentKind::TrainVae, dir.path())).unwrap();
    let pgm = fs::read(dir.path().join("dr-manifold.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n9 9\n255\n"));
    assert_eq!(pgm.len(), b"P5\n9 9\n255\n".len() + 81);
    let Model::Vae(v) = checkpoint::load(dir.path().join("no-dr-final.drn")).unwrap() else {
        panic!("expected a vae checkpoint");
    };
    assert_eq!(v.latent_dim(), 2);
    assert!(read(dir.path(), "dr.csv").starts_with("epoch,elbo,dr_value,objective\n"));
}

#[test]
fn gradcheck_and_pair_stats() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Gradcheck, 2);
    cfg.output_dir = dir.path().join("gc");
    cfg.instances = 5;
    let report = run(&cfg).unwrap();
    assert!(report.success);
    assert_eq!(read(&cfg.output_dir, "gradcheck.txt").lines().count(), 4);

    let mut cfg = ExperimentConfig::defaults(ExperimentKind::PairsStats, 2);
    cfg.output_dir = dir.path().join("ps");
    run(&cfg).unwrap();
    let text = read(&cfg.output_dir, "pairs-stats.txt");
    let mean: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("mean "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((35.0..=45.0).contains(&mean));
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = blobs(ExperimentKind::TrainDnn, dir.path());
    cfg.dataset = DatasetKind::Cifar10;
    std::env::set_var("DR_DATA_DIR", dir.path().join("nowhere"));
    let err = run(&cfg).unwrap_err();
    assert!(err.to_string().contains("nowhere"), "{err}");
}
