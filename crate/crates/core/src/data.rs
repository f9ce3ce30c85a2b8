//! Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, and
//! synthetic blobs for desk-scale runs.

use std::path::Path;

use ndarray::Axis;

use crate::{DenseMatrix, Error, Result, RngState};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3072;

/// Inputs in `[0, 1]`, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: DenseMatrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.nrows(),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidLabel { label, n_classes });
        }
        Ok(Self {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// First `n` examples (all of them if fewer).
    pub fn head(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Splits off the first `n_train` rows, e.g. 50,000 / 10,000 for MNIST train.
    pub fn split_at(&self, n_train: usize) -> (LabeledDataset, LabeledDataset) {
        let n_train = n_train.min(self.len());
        let train: Vec<usize> = (0..n_train).collect();
        let rest: Vec<usize> = (n_train..self.len()).collect();
        (self.select(&train), self.select(&rest))
    }

    /// Seeded random split into `n_train` and the remainder.
    pub fn shuffled_split(&self, n_train: usize, rng: &mut RngState) -> (LabeledDataset, LabeledDataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let n_train = n_train.min(self.len());
        (self.select(&idx[..n_train]), self.select(&idx[n_train..]))
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(Error::at_path(path))
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated(format!("{what} header")))
}

/// Parses an IDX3 image file and IDX1 label file from memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(labels, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(images, 4, "image")? as usize;
    let rows = be_u32(images, 8, "image")? as usize;
    let cols = be_u32(images, 12, "image")? as usize;
    let n_labels = be_u32(labels, 4, "label")? as usize;
    if count != n_labels {
        return Err(Error::CountMismatch {
            images: count,
            labels: n_labels,
        });
    }
    let pixels = rows * cols;
    let body = &images[16..];
    if body.len() < count * pixels {
        return Err(Error::Truncated(format!(
            "image payload has {} bytes, need {}",
            body.len(),
            count * pixels
        )));
    }
    let label_body = &labels[8..];
    if label_body.len() < count {
        return Err(Error::Truncated(format!(
            "label payload has {} bytes, need {count}",
            label_body.len()
        )));
    }
    let inputs = DenseMatrix::from_shape_fn((count, pixels), |(r, c)| body[r * pixels + c] as f64 / 255.0);
    let labels: Vec<usize> = label_body[..count].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(inputs, labels, n_classes)
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledDataset> {
    parse_idx(&read_file(images.as_ref())?, &read_file(labels.as_ref())?)
}

/// Serializes to IDX3/IDX1 (pixels rounded back to bytes).
pub fn encode_idx(data: &LabeledDataset, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    assert_eq!(rows * cols, data.n_features());
    let mut images = Vec::with_capacity(16 + data.inputs.len());
    for v in [IDX_IMAGES_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(data.inputs.iter().map(|&p| (p * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(data.len() as u32).to_be_bytes());
    labels.extend(data.labels.iter().map(|&l| l as u8));
    (images, labels)
}

/// Parses CIFAR-10 binary records: 1 label byte + 3072 pixel bytes each.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledDataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Truncated(format!(
            "CIFAR-10 file length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::InvalidLabel { label, n_classes: 10 });
        }
        labels.push(label);
    }
    let inputs = DenseMatrix::from_shape_fn((n, CIFAR_RECORD - 1), |(r, c)| {
        bytes[r * CIFAR_RECORD + 1 + c] as f64 / 255.0
    });
    LabeledDataset::new(inputs, labels, 10)
}

/// Loads and concatenates CIFAR-10 binary batch files in the given order.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = read_file(p.as_ref())?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::Truncated(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD}",
                p.as_ref().display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10(&bytes)
}

/// Maps every entry to `1` if `≥ threshold`, else `0`.
pub fn binarize(data: &LabeledDataset, threshold: f64) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(LabeledDataset {
        inputs: data.inputs.mapv(|v| if v >= threshold { 1.0 } else { 0.0 }),
        ..data.clone()
    })
}

/// Area-averages `side × side` images down to `target × target`.
pub fn downsample(data: &LabeledDataset, side: usize, target: usize) -> Result<LabeledDataset> {
    if side * side != data.n_features() || target == 0 || target > side {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample {} features as {side}x{side} to {target}x{target}",
            data.n_features()
        )));
    }
    // Each output pixel covers [o·s, (o+1)·s) in source coordinates, s = side/target.
    let scale = side as f64 / target as f64;
    let overlap = |o: usize, src: usize| -> f64 {
        let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
        ((src + 1) as f64).min(hi) - (src as f64).max(lo)
    };
    let mut weights = vec![Vec::new(); target];
    for (o, w) in weights.iter_mut().enumerate() {
        for src in 0..side {
            let a = overlap(o, src);
            if a > 0.0 {
                w.push((src, a / scale));
            }
        }
    }
    let mut out = DenseMatrix::zeros((data.len(), target * target));
    for (r, img) in data.inputs.rows().into_iter().enumerate() {
        for oy in 0..target {
            for ox in 0..target {
                let mut acc = 0.0;
                for &(sy, wy) in &weights[oy] {
                    for &(sx, wx) in &weights[ox] {
                        acc += wy * wx * img[sy * side + sx];
                    }
                }
                out[[r, oy * target + ox]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Ok(LabeledDataset {
        inputs: out,
        ..data.clone()
    })
}

/// Gaussian blobs clipped to `[0, 1]`.
///
/// Class `c` has a random center in `[0,1]^dim`, pulled apart from 0.5 by
/// `separation`; points get isotropic noise with std 0.1. Rows are grouped by
/// class.
pub fn synth_blobs(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    separation: f64,
    rng: &mut RngState,
) -> Result<LabeledDataset> {
    if n_per_class == 0 || n_classes == 0 || dim == 0 {
        return Err(Error::InvalidArgument("blob counts must be >= 1".into()));
    }
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            (0..dim)
                .map(|_| (0.5 + separation * (rng.uniform() - 0.5)).clamp(0.0, 1.0))
                .collect()
        })
        .collect();
    let n = n_per_class * n_classes;
    let labels: Vec<usize> = (0..n).map(|i| i / n_per_class).collect();
    let mut inputs = DenseMatrix::zeros((n, dim));
    for (r, &label) in labels.iter().enumerate() {
        for c in 0..dim {
            inputs[[r, c]] = (centers[label][c] + 0.1 * rng.normal()).clamp(0.0, 1.0);
        }
    }
    LabeledDataset::new(inputs, labels, n_classes)
}
