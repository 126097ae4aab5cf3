//! Dataset ingestion and batching.
//!
//! Datasets hold examples as columns of a `d x N` matrix so that a whole
//! batch forward pass is a single matmul chain. Sources are MNIST-style IDX
//! file pairs and a synthetic Gaussian-classes generator that stands in for
//! MNIST at desk scale. Datasets are immutable after construction; batch
//! sequences are plain index views.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::net::Targets;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{file} file: bad magic {found:#010x} at offset 0, expected {expected:#010x}")]
    BadMagic {
        file: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("{file} file truncated at byte offset {offset}")]
    Truncated { file: &'static str, offset: usize },
    #[error("{file} file has {trailing} trailing bytes at offset {offset}")]
    TrailingBytes {
        file: &'static str,
        offset: usize,
        trailing: usize,
    },
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at example {index} out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("label count {labels} does not match {examples} examples")]
    LabelCount { labels: usize, examples: usize },
    #[error("invalid dataset parameter: {0}")]
    BadParameter(String),
    #[error("label {label} does not fit in an idx byte")]
    LabelTooLargeForIdx { label: usize },
    #[error("subset of {requested} examples from a dataset of {available}")]
    SubsetTooLarge { requested: usize, available: usize },
}

/// Labeled examples as columns of a dense matrix.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if labels.len() != inputs.cols() {
            return Err(DataError::LabelCount {
                labels: labels.len(),
                examples: inputs.cols(),
            });
        }
        if num_classes == 0 {
            return Err(DataError::BadParameter(
                "num_classes must be positive".to_string(),
            ));
        }
        for (index, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(DataError::LabelOutOfRange {
                    index,
                    label,
                    num_classes,
                });
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies out the given example columns and their labels.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let inputs = Matrix::from_fn(self.dim(), indices.len(), |i, j| {
            self.inputs.get(i, indices[j])
        });
        let labels = indices.iter().map(|&j| self.labels[j]).collect();
        (inputs, labels)
    }

    /// Classification targets for the given example columns.
    pub fn targets_for(&self, labels: Vec<usize>) -> Targets {
        Targets::Classes {
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Seeded subset of `n` examples (without replacement, original column
    /// order preserved). The parent's class count is kept even if the subset
    /// misses classes.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset, DataError> {
        if n == 0 || n > self.len() {
            return Err(DataError::SubsetTooLarge {
                requested: n,
                available: self.len(),
            });
        }
        if n == self.len() {
            return Ok(self.clone());
        }
        let mut indices: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        let mut chosen = indices[..n].to_vec();
        chosen.sort_unstable();
        let (inputs, labels) = self.gather(&chosen);
        Dataset::new(inputs, labels, self.num_classes)
    }

    /// Seeded permutation of all examples, split into batches of
    /// `batch_size` (the last batch may be short). Every index appears
    /// exactly once per epoch.
    pub fn batches(&self, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>, DataError> {
        if batch_size == 0 {
            return Err(DataError::BadParameter(
                "batch_size must be positive".to_string(),
            ));
        }
        let mut indices: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        indices.shuffle(&mut rng);
        Ok(indices
            .chunks(batch_size)
            .map(|chunk| Batch {
                indices: chunk.to_vec(),
            })
            .collect())
    }
}

/// Index view into a [`Dataset`].
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Loads an MNIST-style IDX image/label file pair. Pixels are scaled to
/// `[0, 1]`; images are flattened to `rows * cols` dimensional columns.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images_bytes = fs::read(images_path)?;
    let labels_bytes = fs::read(labels_path)?;

    let mut cur = Cursor::new(images_bytes.as_slice());
    let magic = read_u32(&mut cur, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            file: "images",
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(&mut cur, "images")? as usize;
    let rows = read_u32(&mut cur, "images")? as usize;
    let cols = read_u32(&mut cur, "images")? as usize;
    let dim = rows * cols;
    if count == 0 || dim == 0 {
        return Err(DataError::BadParameter(format!(
            "images file declares {count} examples of {rows}x{cols} pixels"
        )));
    }
    let header = cur.position() as usize;
    let payload = &images_bytes[header..];
    if payload.len() < count * dim {
        return Err(DataError::Truncated {
            file: "images",
            offset: header + payload.len(),
        });
    }
    if payload.len() > count * dim {
        return Err(DataError::TrailingBytes {
            file: "images",
            offset: header + count * dim,
            trailing: payload.len() - count * dim,
        });
    }

    let mut lcur = Cursor::new(labels_bytes.as_slice());
    let lmagic = read_u32(&mut lcur, "labels")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            file: "labels",
            expected: IDX_LABELS_MAGIC,
            found: lmagic,
        });
    }
    let lcount = read_u32(&mut lcur, "labels")? as usize;
    if lcount != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: lcount,
        });
    }
    let lheader = lcur.position() as usize;
    let lpayload = &labels_bytes[lheader..];
    if lpayload.len() < count {
        return Err(DataError::Truncated {
            file: "labels",
            offset: lheader + lpayload.len(),
        });
    }
    if lpayload.len() > count {
        return Err(DataError::TrailingBytes {
            file: "labels",
            offset: lheader + count,
            trailing: lpayload.len() - count,
        });
    }

    let mut inputs = Matrix::zeros(dim, count);
    for (j, image) in payload.chunks_exact(dim).enumerate() {
        for (i, &byte) in image.iter().enumerate() {
            inputs.set(i, j, byte as f64 / 255.0);
        }
    }
    let labels: Vec<usize> = lpayload.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(inputs, labels, num_classes)
}

/// Writes a dataset as an IDX pair (`rows = dim`, `cols = 1`). Pixels are
/// quantized to bytes; labels must fit in a byte.
pub fn save_idx(
    dataset: &Dataset,
    images_path: &Path,
    labels_path: &Path,
) -> Result<(), DataError> {
    let dim = dataset.dim() as u32;
    let mut images = Vec::with_capacity(16 + dataset.len() * dataset.dim());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    images.extend_from_slice(&dim.to_be_bytes());
    images.extend_from_slice(&1u32.to_be_bytes());
    for j in 0..dataset.len() {
        for i in 0..dataset.dim() {
            let v = (dataset.inputs.get(i, j) * 255.0).round().clamp(0.0, 255.0);
            images.push(v as u8);
        }
    }
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &label in dataset.labels() {
        if label > u8::MAX as usize {
            return Err(DataError::LabelTooLargeForIdx { label });
        }
        labels.push(label as u8);
    }
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}

/// Synthetic classification data: class `c` is drawn from
/// `N(separation * mu_c, I)` with `mu_c = e_{c mod d}`. Deterministic for a
/// given seed. Classes collide when `num_classes > d`.
pub fn synthetic_gaussian_classes(
    num_classes: usize,
    d: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if num_classes == 0 || d == 0 || per_class == 0 {
        return Err(DataError::BadParameter(format!(
            "num_classes, d and per_class must be positive, got {num_classes}, {d}, {per_class}"
        )));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(DataError::BadParameter(format!(
            "separation must be finite and nonnegative, got {separation}"
        )));
    }
    let n = num_classes * per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Matrix::zeros(d, n);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        let mean_coord = c % d;
        for k in 0..per_class {
            let j = c * per_class + k;
            for i in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let mean = if i == mean_coord { separation } else { 0.0 };
                inputs.set(i, j, mean + noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, num_classes)
}

fn read_u32(cur: &mut Cursor<&[u8]>, file: &'static str) -> Result<u32, DataError> {
    let offset = cur.position() as usize;
    cur.read_u32::<BigEndian>()
        .map_err(|_| DataError::Truncated { file, offset })
}
