//! Experiment runner: loads data, trains the DR and no-DR arms from identical
//! initial parameters, and writes curves, checkpoints and timings.
//!
//! Artifacts in the output directory:
//!
//! | kind          | files |
//! |---------------|-------|
//! | all           | `config.txt`, `timings.txt` (wall-clock seconds per arm, kept out of the CSVs) |
//! | train-dnn     | `<arm>.csv` (`epoch,effective_alpha,dr_value,cost,test_error`), `<arm>-init.drn`, `<arm>-final.drn` |
//! | pretrain-dbn  | `<arm>-pretrain-layer<l>.csv` (`epoch,pll,dr_value`), `<arm>-finetune.csv`, `<arm>-stack.drn`, `<arm>-init.drn`, `<arm>-finetuned.drn` |
//! | train-vae     | `<arm>.csv` (`epoch,elbo,dr_value,objective`), `<arm>-manifold.pgm`, `<arm>-init.drn`, `<arm>-final.drn` |
//! | gradcheck     | `gradcheck.txt` |
//! | pairs-stats   | `pairs-stats.txt` |
//!
//! `<arm>` is `dr` or `no-dr`; the second arm runs only with `compare = true`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::{self, Model};
use crate::config::{DatasetKind, ExperimentConfig, ExperimentKind};
use crate::curve::LearningCurve;
use crate::data::{self, LabeledDataset};
use crate::dbn::{export_mlp, pretrain_layerwise, Pretraining};
use crate::dnn::{train_classifier, ClassifierTraining, DrSchedule, Mlp, OutputActivation, SideInfo};
use crate::gradcheck;
use crate::rbm::RbmTraining;
use crate::sideinfo::{cross_class_pair_count, sample_global_pairs, PairSet};
use crate::vae::{manifold_grid, train_vae, DrMode, VaeModel, VaeTraining};
use crate::{Error, Result, RngState};

/// Environment variable naming the dataset root (default `./data`).
pub const DATA_DIR_ENV: &str = "DR_DATA_DIR";

pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

#[derive(Debug, Clone)]
pub struct Report {
    /// `(artifact stem, curve)` for every CSV written.
    pub curves: Vec<(String, LearningCurve)>,
    /// Human-readable summary.
    pub lines: Vec<String>,
    /// False when a gate (gradcheck) failed.
    pub success: bool,
}

impl Report {
    pub fn curve(&self, name: &str) -> Option<&LearningCurve> {
        self.curves.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Arm {
    Dr,
    NoDr,
}

impl Arm {
    fn name(self) -> &'static str {
        match self {
            Arm::Dr => "dr",
            Arm::NoDr => "no-dr",
        }
    }
}

fn arms(cfg: &ExperimentConfig) -> Vec<Arm> {
    if cfg.compare {
        vec![Arm::Dr, Arm::NoDr]
    } else {
        vec![Arm::Dr]
    }
}

/// Independent seeds for initialization, training, and pair sampling.
struct Seeds {
    init: u64,
    train: u64,
    pairs: u64,
}

impl Seeds {
    fn new(seed: u64) -> Self {
        let mut master = RngState::new(seed);
        Self {
            init: master.next_seed(),
            train: master.next_seed(),
            pairs: master.next_seed(),
        }
    }
}

struct Output {
    dir: PathBuf,
    report: Report,
    timings: String,
}

impl Output {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(Error::at_path(&dir))?;
        let path = dir.join("config.txt");
        std::fs::write(&path, cfg.to_text()).map_err(Error::at_path(&path))?;
        Ok(Self {
            dir,
            report: Report {
                curves: Vec::new(),
                lines: Vec::new(),
                success: true,
            },
            timings: String::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn curve(&mut self, stem: &str, curve: LearningCurve) -> Result<()> {
        curve.write_csv(self.path(&format!("{stem}.csv")))?;
        self.report.curves.push((stem.to_string(), curve));
        Ok(())
    }

    fn checkpoint(&self, name: &str, model: &Model) -> Result<()> {
        checkpoint::save(model, self.path(name))
    }

    fn timing(&mut self, label: &str, start: Instant) {
        let secs = start.elapsed().as_secs_f64();
        let _ = writeln!(self.timings, "{label} {secs:.3}");
        self.report.lines.push(format!("{label}: {:.1} min", secs / 60.0));
    }

    fn finish(mut self) -> Result<Report> {
        if !self.timings.is_empty() {
            let path = self.path("timings.txt");
            std::fs::write(&path, &self.timings).map_err(Error::at_path(&path))?;
        }
        self.report.lines.push(format!("artifacts in {}", self.dir.display()));
        Ok(self.report)
    }
}

/// Runs one experiment and writes its artifacts.
pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    match cfg.kind {
        ExperimentKind::TrainDnn => run_dnn(cfg),
        ExperimentKind::PretrainDbn => run_dbn(cfg),
        ExperimentKind::TrainVae => run_vae(cfg),
        ExperimentKind::Gradcheck => run_gradcheck(cfg),
        ExperimentKind::PairsStats => run_pairs_stats(cfg),
    }
}

/// Train and test sets as configured.
pub fn load_datasets(cfg: &ExperimentConfig, root: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let (mut train, mut test) = match cfg.dataset {
        DatasetKind::Mnist => {
            let dir = root.join("mnist");
            let full = data::load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
            let test = data::load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
            // 50,000 / 10,000 train / validation split; validation is unused.
            (full.split_at(50_000.min(full.len())).0, test)
        }
        DatasetKind::Cifar10 => {
            let dir = root.join("cifar-10-batches-bin");
            let batches: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            (
                data::load_cifar10_binary(&batches)?,
                data::load_cifar10_binary(&[dir.join("test_batch.bin")])?,
            )
        }
        DatasetKind::Blobs => {
            let mut rng = RngState::new(cfg.seed ^ 0x626c_6f62);
            let per_class = cfg.blob_per_class + cfg.blob_test_per_class;
            let all = data::synth_blobs(per_class, cfg.blob_classes, cfg.blob_dim, cfg.blob_separation, &mut rng)?;
            all.shuffled_split(cfg.blob_per_class * cfg.blob_classes, &mut rng)
        }
    };
    if cfg.train_subset > 0 {
        train = train.head(cfg.train_subset.min(train.len()));
    }
    if cfg.test_subset > 0 {
        test = test.head(cfg.test_subset.min(test.len()));
    }
    if cfg.downsample > 0 {
        let side = (train.n_features() as f64).sqrt().round() as usize;
        train = data::downsample(&train, side, cfg.downsample)?;
        test = data::downsample(&test, side, cfg.downsample)?;
    }
    if let Some(t) = cfg.binarize {
        train = data::binarize(&train, t)?;
        test = data::binarize(&test, t)?;
    }
    Ok((train, test))
}

fn sizes_with_io(cfg: &ExperimentConfig, train: &LabeledDataset) -> Vec<usize> {
    let mut sizes = vec![train.n_features()];
    sizes.extend(&cfg.hidden);
    sizes.push(train.n_classes);
    sizes
}

fn run_dnn(cfg: &ExperimentConfig) -> Result<Report> {
    let (train, test) = load_datasets(cfg, &data_root())?;
    let seeds = Seeds::new(cfg.seed);
    let mut out = Output::new(cfg)?;
    let init = Mlp::random(
        &sizes_with_io(cfg, &train),
        cfg.init_std,
        OutputActivation::Softmax,
        &mut RngState::new(seeds.init),
    );
    let pairs = if cfg.alpha > 0.0 && cfg.global_pairs > 0 && cfg.side_info == SideInfo::Global {
        sample_global_pairs(&train.labels, cfg.global_pairs, &mut RngState::new(seeds.pairs))?
    } else {
        PairSet::empty()
    };
    let mut schedule = DrSchedule::new(cfg.alpha, cfg.decay)?;
    if !cfg.layer_scales.is_empty() {
        schedule = schedule.with_layer_scales(cfg.layer_scales.clone())?;
    }
    for arm in arms(cfg) {
        let mut model = init.clone();
        out.checkpoint(&format!("{}-init.drn", arm.name()), &Model::Mlp(model.clone()))?;
        let training = ClassifierTraining {
            lr: cfg.lr,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            schedule: if arm == Arm::Dr { schedule.clone() } else { DrSchedule::off() },
            weight_penalty: cfg.weight_penalty,
            side_info: cfg.side_info,
        };
        let start = Instant::now();
        let curve = train_classifier(&mut model, &train, &test, &pairs, &training, &mut RngState::new(seeds.train))?;
        out.timing(arm.name(), start);
        let err = curve.column("test_error").unwrap_or_default();
        out.report.lines.push(format!(
            "{}: final test error {:.2}%, best {:.2}%",
            arm.name(),
            100.0 * err.last().copied().unwrap_or(f64::NAN),
            100.0 * err.iter().copied().fold(f64::INFINITY, f64::min)
        ));
        out.curve(arm.name(), curve)?;
        out.checkpoint(&format!("{}-final.drn", arm.name()), &Model::Mlp(model))?;
    }
    out.finish()
}

fn run_dbn(cfg: &ExperimentConfig) -> Result<Report> {
    let (train, test) = load_datasets(cfg, &data_root())?;
    let seeds = Seeds::new(cfg.seed);
    let mut out = Output::new(cfg)?;
    for arm in arms(cfg) {
        let pre = Pretraining {
            hidden_sizes: cfg.hidden.clone(),
            rbm: RbmTraining {
                lr: cfg.lr,
                alpha: if arm == Arm::Dr { cfg.alpha } else { 0.0 },
                k: cfg.k,
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
            },
        };
        let start = Instant::now();
        // Same init and training streams in both arms.
        let mut rng = RngState::new(seeds.init);
        let (stack, curves) = pretrain_layerwise(train.inputs.view(), &train.labels, &pre, &mut rng)?;
        out.timing(&format!("{}-pretrain", arm.name()), start);
        for (l, curve) in curves.into_iter().enumerate() {
            out.curve(&format!("{}-pretrain-layer{l}", arm.name()), curve)?;
        }
        out.checkpoint(&format!("{}-stack.drn", arm.name()), &Model::Dbn(stack.clone()))?;

        let mut model = export_mlp(&stack, train.n_classes, &mut RngState::new(seeds.pairs))?;
        out.checkpoint(&format!("{}-init.drn", arm.name()), &Model::Mlp(model.clone()))?;
        let fine = ClassifierTraining {
            lr: cfg.finetune_lr,
            epochs: cfg.finetune_epochs,
            batch_size: cfg.finetune_batch_size,
            schedule: DrSchedule::off(),
            weight_penalty: cfg.weight_penalty,
            side_info: SideInfo::Global,
        };
        let start = Instant::now();
        let curve = train_classifier(&mut model, &train, &test, &PairSet::empty(), &fine, &mut RngState::new(seeds.train))?;
        out.timing(&format!("{}-finetune", arm.name()), start);
        let err = curve.column("test_error").unwrap_or_default();
        out.report.lines.push(format!(
            "{}: fine-tuned test error {:.2}%",
            arm.name(),
            100.0 * err.last().copied().unwrap_or(f64::NAN)
        ));
        out.curve(&format!("{}-finetune", arm.name()), curve)?;
        out.checkpoint(&format!("{}-finetuned.drn", arm.name()), &Model::Mlp(model))?;
    }
    out.finish()
}

fn run_vae(cfg: &ExperimentConfig) -> Result<Report> {
    let (train, _) = load_datasets(cfg, &data_root())?;
    let seeds = Seeds::new(cfg.seed);
    let mut out = Output::new(cfg)?;
    let hidden = cfg.hidden[0];
    let init = VaeModel::new(train.n_features(), hidden, cfg.latent, cfg.init_std, &mut RngState::new(seeds.init));
    let side = (train.n_features() as f64).sqrt().round() as usize;
    let (tile_w, tile_h) = if side * side == train.n_features() { (side, side) } else { (train.n_features(), 1) };
    for arm in arms(cfg) {
        let mut model = init.clone();
        out.checkpoint(&format!("{}-init.drn", arm.name()), &Model::Vae(model.clone()))?;
        let training = VaeTraining {
            lr: cfg.lr,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            alpha: if arm == Arm::Dr { cfg.alpha } else { 0.0 },
            mode: if arm == Arm::Dr { cfg.vae_mode } else { DrMode::None },
        };
        let start = Instant::now();
        let curve = train_vae(&mut model, train.inputs.view(), &train.labels, &training, &mut RngState::new(seeds.train))?;
        out.timing(arm.name(), start);
        let elbo = curve.column("elbo").unwrap_or_default();
        out.report.lines.push(format!(
            "{}: mean ELBO per example {:.2} (first epoch) -> {:.2} (last epoch)",
            arm.name(),
            elbo.first().copied().unwrap_or(f64::NAN),
            elbo.last().copied().unwrap_or(f64::NAN)
        ));
        out.curve(arm.name(), curve)?;
        out.checkpoint(&format!("{}-final.drn", arm.name()), &Model::Vae(model.clone()))?;
        if cfg.latent == 2 {
            let grid = manifold_grid(&model, cfg.grid_lo, cfg.grid_hi, cfg.grid_steps)?;
            grid.write_pgm(out.path(&format!("{}-manifold.pgm", arm.name())), tile_w, tile_h)?;
        }
    }
    out.finish()
}

fn run_gradcheck(cfg: &ExperimentConfig) -> Result<Report> {
    let mut out = Output::new(cfg)?;
    let outcomes = gradcheck::run_suite(cfg.instances, cfg.seed)?;
    let mut text = String::new();
    for o in &outcomes {
        let _ = writeln!(text, "{o}");
        out.report.lines.push(o.to_string());
    }
    let path = out.path("gradcheck.txt");
    std::fs::write(&path, text).map_err(Error::at_path(&path))?;
    out.report.success = outcomes.iter().all(gradcheck::CheckOutcome::passed);
    out.finish()
}

/// Mean, standard deviation, min and max of the cross-class pair count over
/// simulated batches with uniform labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub batches: usize,
    pub mean: f64,
    pub std: f64,
    pub min: usize,
    pub max: usize,
    /// `C(B, 2)·(1 − 1/K)`
    pub expected: f64,
}

pub fn pair_stats(batch_size: usize, classes: usize, batches: usize, rng: &mut RngState) -> PairStats {
    let counts: Vec<usize> = (0..batches)
        .map(|_| {
            let labels: Vec<usize> = (0..batch_size).map(|_| rng.index(classes)).collect();
            cross_class_pair_count(&labels)
        })
        .collect();
    let n = batches as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    PairStats {
        batches,
        mean,
        std: var.sqrt(),
        min: counts.iter().copied().min().unwrap_or(0),
        max: counts.iter().copied().max().unwrap_or(0),
        expected: (batch_size * batch_size.saturating_sub(1)) as f64 / 2.0 * (1.0 - 1.0 / classes as f64),
    }
}

fn run_pairs_stats(cfg: &ExperimentConfig) -> Result<Report> {
    let mut out = Output::new(cfg)?;
    let s = pair_stats(cfg.batch_size, cfg.pair_classes, cfg.pair_batches, &mut RngState::new(cfg.seed));
    let text = format!(
        "batches {}\nbatch_size {}\nclasses {}\nmean {}\nstd {}\nmin {}\nmax {}\nexpected {}\n",
        s.batches, cfg.batch_size, cfg.pair_classes, s.mean, s.std, s.min, s.max, s.expected
    );
    let path = out.path("pairs-stats.txt");
    std::fs::write(&path, text).map_err(Error::at_path(&path))?;
    out.report.lines.push(format!(
        "mean cross-class pairs per batch {:.3} (expected {:.3}, range {}..={})",
        s.mean, s.expected, s.min, s.max
    ));
    out.finish()
}
