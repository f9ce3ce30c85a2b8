//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored. Values
//! not given fall back to the defaults for the experiment kind, and
//! command-line overrides use the same `key=value` syntax. `seed` has no
//! default.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dnn::SideInfo;
use crate::vae::DrMode;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    PretrainDbn,
    TrainDnn,
    TrainVae,
    Gradcheck,
    PairsStats,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::PretrainDbn,
        ExperimentKind::TrainDnn,
        ExperimentKind::TrainVae,
        ExperimentKind::Gradcheck,
        ExperimentKind::PairsStats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::PretrainDbn => "pretrain-dbn",
            ExperimentKind::TrainDnn => "train-dnn",
            ExperimentKind::TrainVae => "train-vae",
            ExperimentKind::Gradcheck => "gradcheck",
            ExperimentKind::PairsStats => "pairs-stats",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// IDX files under `<data root>/mnist`.
    Mnist,
    /// Binary batches under `<data root>/cifar-10-batches-bin`.
    Cifar10,
    /// Synthetic Gaussian blobs.
    Blobs,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Blobs => "blobs",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "blobs" => Ok(DatasetKind::Blobs),
            other => Err(Error::Config(format!("unknown dataset '{other}' (mnist, cifar10, blobs)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub output_dir: PathBuf,

    pub dataset: DatasetKind,
    /// Leading training examples kept (0 keeps all).
    pub train_subset: usize,
    pub test_subset: usize,
    /// Side length after area-averaging square images (0 keeps the original).
    pub downsample: usize,
    pub binarize: Option<f64>,
    pub blob_per_class: usize,
    pub blob_classes: usize,
    pub blob_dim: usize,
    pub blob_separation: f64,
    pub blob_test_per_class: usize,

    /// Hidden layer sizes, bottom to top.
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub init_std: f64,

    pub lr: f64,
    pub alpha: f64,
    pub decay: f64,
    pub layer_scales: Vec<f64>,
    pub weight_penalty: f64,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub global_pairs: usize,
    pub side_info: SideInfo,
    pub vae_mode: DrMode,

    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_batch_size: usize,

    /// Run the no-DR arm next to the DR arm from the same initialization.
    pub compare: bool,

    pub grid_steps: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,

    pub instances: usize,
    pub pair_batches: usize,
    pub pair_classes: usize,
}

impl ExperimentConfig {
    /// Defaults for `kind`; the seed must still be supplied.
    pub fn defaults(kind: ExperimentKind, seed: u64) -> Self {
        let base = Self {
            kind,
            seed,
            output_dir: PathBuf::from("runs").join(kind.name()),
            dataset: DatasetKind::Mnist,
            train_subset: 0,
            test_subset: 0,
            downsample: 0,
            binarize: None,
            blob_per_class: 100,
            blob_classes: 3,
            blob_dim: 16,
            blob_separation: 0.6,
            blob_test_per_class: 50,
            hidden: vec![30, 30, 30, 20, 20],
            latent: 2,
            init_std: crate::dnn::INIT_STD,
            lr: 1.0,
            alpha: 50.0,
            decay: 0.9,
            layer_scales: Vec::new(),
            weight_penalty: 0.0,
            k: 1,
            epochs: 200,
            batch_size: 200,
            global_pairs: 202_770,
            side_info: SideInfo::Global,
            vae_mode: DrMode::CrossEntropy,
            finetune_lr: 0.01,
            finetune_epochs: 200,
            finetune_batch_size: 10,
            compare: true,
            grid_steps: 20,
            grid_lo: -6.0,
            grid_hi: 6.0,
            instances: 100,
            pair_batches: 10_000,
            pair_classes: 10,
        };
        match kind {
            ExperimentKind::TrainDnn | ExperimentKind::Gradcheck => base,
            ExperimentKind::PretrainDbn => Self {
                dataset: DatasetKind::Cifar10,
                hidden: vec![500, 300, 200, 150, 100, 80, 60, 50, 30, 20],
                init_std: crate::rbm::INIT_STD,
                lr: 0.01,
                decay: 1.0,
                batch_size: 10,
                ..base
            },
            ExperimentKind::TrainVae => Self {
                binarize: Some(0.5),
                hidden: vec![600],
                init_std: crate::vae::INIT_STD,
                lr: 0.05,
                alpha: 0.01,
                decay: 1.0,
                epochs: 100,
                batch_size: 20,
                ..base
            },
            ExperimentKind::PairsStats => Self {
                batch_size: 10,
                ..base
            },
        }
    }

    /// Parses a config file body; `kind` and `seed` may come from the text or
    /// from `overrides`, which are applied last.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries = parse_pairs(text)?;
        for (k, v) in overrides {
            entries.insert(k.clone(), v.clone());
        }
        let kind: ExperimentKind = entries
            .remove("kind")
            .ok_or_else(|| Error::Config("missing 'kind'".into()))?
            .parse()?;
        let seed = entries
            .remove("seed")
            .ok_or_else(|| Error::Config("missing 'seed' (runs are always seeded)".into()))?;
        let seed = parse_value("seed", &seed)?;
        let mut cfg = Self::defaults(kind, seed);
        for (key, value) in &entries {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::at_path(path))?;
        Self::parse(&text, overrides)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "kind" => self.kind = v.parse()?,
            "seed" => self.seed = parse_value(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "dataset" => self.dataset = v.parse()?,
            "train_subset" => self.train_subset = parse_value(key, v)?,
            "test_subset" => self.test_subset = parse_value(key, v)?,
            "downsample" => self.downsample = parse_value(key, v)?,
            "binarize" => {
                self.binarize = match v {
                    "none" | "off" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "blob_per_class" => self.blob_per_class = parse_value(key, v)?,
            "blob_classes" => self.blob_classes = parse_value(key, v)?,
            "blob_dim" => self.blob_dim = parse_value(key, v)?,
            "blob_separation" => self.blob_separation = parse_value(key, v)?,
            "blob_test_per_class" => self.blob_test_per_class = parse_value(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "latent" => self.latent = parse_value(key, v)?,
            "init_std" => self.init_std = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "decay" => self.decay = parse_value(key, v)?,
            "layer_scales" => self.layer_scales = parse_list(key, v)?,
            "weight_penalty" => self.weight_penalty = parse_value(key, v)?,
            "k" => self.k = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "global_pairs" => self.global_pairs = parse_value(key, v)?,
            "side_info" => {
                self.side_info = match v {
                    "global" => SideInfo::Global,
                    "batch" => SideInfo::Batch,
                    other => return Err(Error::Config(format!("unknown side_info '{other}' (global, batch)"))),
                }
            }
            "vae_mode" => self.vae_mode = v.parse()?,
            "finetune_lr" => self.finetune_lr = parse_value(key, v)?,
            "finetune_epochs" => self.finetune_epochs = parse_value(key, v)?,
            "finetune_batch_size" => self.finetune_batch_size = parse_value(key, v)?,
            "compare" => self.compare = parse_value(key, v)?,
            "grid_steps" => self.grid_steps = parse_value(key, v)?,
            "grid_lo" => self.grid_lo = parse_value(key, v)?,
            "grid_hi" => self.grid_hi = parse_value(key, v)?,
            "instances" => self.instances = parse_value(key, v)?,
            "pair_batches" => self.pair_batches = parse_value(key, v)?,
            "pair_classes" => self.pair_classes = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("latent", self.latent),
            ("finetune_epochs", self.finetune_epochs),
            ("finetune_batch_size", self.finetune_batch_size),
            ("blob_per_class", self.blob_per_class),
            ("blob_classes", self.blob_classes),
            ("blob_dim", self.blob_dim),
            ("instances", self.instances),
            ("pair_batches", self.pair_batches),
            ("pair_classes", self.pair_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("'{name}' must be positive")));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("'hidden' needs at least one positive size".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("'decay' must lie in (0, 1], got {}", self.decay)));
        }
        for (name, v) in [("lr", self.lr), ("finetune_lr", self.finetune_lr), ("init_std", self.init_std)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("'{name}' must be positive, got {v}")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("weight_penalty", self.weight_penalty)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("'{name}' must be non-negative, got {v}")));
            }
        }
        if self.layer_scales.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Config("'layer_scales' entries must be non-negative".into()));
        }
        if let Some(t) = self.binarize {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("'binarize' threshold must lie in [0, 1], got {t}")));
            }
        }
        if self.grid_steps < 2 || !(self.grid_lo < self.grid_hi) {
            return Err(Error::Config("manifold grid needs grid_steps >= 2 and grid_lo < grid_hi".into()));
        }
        Ok(())
    }

    /// Every field as `key = value`, in a form [`ExperimentConfig::parse`]
    /// reads back.
    pub fn to_text(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let list = |v: &[usize]| join(&v.iter().map(usize::to_string).collect::<Vec<_>>());
        let flist = |v: &[f64]| join(&v.iter().map(f64::to_string).collect::<Vec<_>>());
        let mode = match self.vae_mode {
            DrMode::None => "none",
            DrMode::CrossEntropy => "ce",
            DrMode::L2 => "l2",
        };
        let fields: Vec<(&str, String)> = vec![
            ("kind", self.kind.to_string()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("dataset", self.dataset.name().to_string()),
            ("train_subset", self.train_subset.to_string()),
            ("test_subset", self.test_subset.to_string()),
            ("downsample", self.downsample.to_string()),
            ("binarize", self.binarize.map_or("none".into(), |t| t.to_string())),
            ("blob_per_class", self.blob_per_class.to_string()),
            ("blob_classes", self.blob_classes.to_string()),
            ("blob_dim", self.blob_dim.to_string()),
            ("blob_separation", self.blob_separation.to_string()),
            ("blob_test_per_class", self.blob_test_per_class.to_string()),
            ("hidden", list(&self.hidden)),
            ("latent", self.latent.to_string()),
            ("init_std", self.init_std.to_string()),
            ("lr", self.lr.to_string()),
            ("alpha", self.alpha.to_string()),
            ("decay", self.decay.to_string()),
            ("layer_scales", flist(&self.layer_scales)),
            ("weight_penalty", self.weight_penalty.to_string()),
            ("k", self.k.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("global_pairs", self.global_pairs.to_string()),
            (
                "side_info",
                match self.side_info {
                    SideInfo::Global => "global",
                    SideInfo::Batch => "batch",
                }
                .to_string(),
            ),
            ("vae_mode", mode.to_string()),
            ("finetune_lr", self.finetune_lr.to_string()),
            ("finetune_epochs", self.finetune_epochs.to_string()),
            ("finetune_batch_size", self.finetune_batch_size.to_string()),
            ("compare", self.compare.to_string()),
            ("grid_steps", self.grid_steps.to_string()),
            ("grid_lo", self.grid_lo.to_string()),
            ("grid_hi", self.grid_hi.to_string()),
            ("instances", self.instances.to_string()),
            ("pair_batches", self.pair_batches.to_string()),
            ("pair_classes", self.pair_classes.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in fields {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Splits `key=value` (used for command-line overrides).
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{s}' is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{}'", n + 1, k.trim())));
        }
    }
    Ok(out)
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse '{v}' for '{key}'")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_value(key, s.trim())).collect()
}
