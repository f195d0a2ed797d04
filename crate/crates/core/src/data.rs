//! MNIST (IDX) and CIFAR-10 (binary batch) datasets, deterministic batching
//! and symmetric label noise.
//!
//! Pixels are scaled to `[0, 1]` and never standardized, so attack budgets
//! are in absolute pixel units.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MNIST_IMAGE_MAGIC: u32 = 2051;
pub const MNIST_LABEL_MAGIC: u32 = 2049;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    #[default]
    Mnist,
    Cifar10,
}

impl DatasetName {
    /// (channels, height, width) of one image.
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            DatasetName::Mnist => [1, 28, 28],
            DatasetName::Cifar10 => [3, 32, 32],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    name: DatasetName,
    split: Split,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, name: DatasetName, split: Split, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Dimension(format!("images must be (N, C, H, W), got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Label(format!("label {bad} outside [0, {num_classes})")));
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Domain("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            name,
            split,
            num_classes,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn name(&self) -> DatasetName {
        self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (channels, height, width)
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` examples (all of them when `n >= len`).
    pub fn truncate(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..*self
        })
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn need(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], magic: u32) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: 4,
            found: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    Ok(())
}

/// Parses an MNIST image/label IDX pair (raw or gzip-compressed).
pub fn load_mnist(image_path: &Path, label_path: &Path, split: Split) -> Result<Dataset> {
    let img = read_maybe_gz(image_path)?;
    check_magic(image_path, &img, MNIST_IMAGE_MAGIC)?;
    if img.len() < 16 {
        return Err(Error::Length {
            path: image_path.to_path_buf(),
            expected: 16,
            found: img.len(),
        });
    }
    let (count, rows, cols) = (
        be_u32(&img, 4) as usize,
        be_u32(&img, 8) as usize,
        be_u32(&img, 12) as usize,
    );
    need(image_path, &img, 16 + count * rows * cols)?;

    let lab = read_maybe_gz(label_path)?;
    check_magic(label_path, &lab, MNIST_LABEL_MAGIC)?;
    if lab.len() < 8 {
        return Err(Error::Length {
            path: label_path.to_path_buf(),
            expected: 8,
            found: lab.len(),
        });
    }
    let label_count = be_u32(&lab, 4) as usize;
    need(label_path, &lab, 8 + label_count)?;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{} holds {count} images but {} holds {label_count} labels",
            image_path.display(),
            label_path.display()
        )));
    }

    let pixels = img[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| usize::from(b)).collect();
    let images = Tensor::new(vec![count, 1, rows, cols], pixels)?;
    Dataset::new(images, labels, DatasetName::Mnist, split, NUM_CLASSES)
}

fn find_existing(dir: &Path, stem: &str) -> PathBuf {
    let plain = dir.join(stem);
    if plain.exists() {
        return plain;
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        plain
    }
}

/// MNIST split from a directory holding the official file names.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        find_existing(dir, &format!("{prefix}-images-idx3-ubyte")),
        find_existing(dir, &format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split);
    load_mnist(&images, &labels, split)
}

/// Re-encodes a dataset as an IDX image file and an IDX label file.
pub fn encode_mnist(dataset: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let [_, rows, cols] = dataset.image_shape();
    let n = dataset.len() as u32;
    let mut img = Vec::with_capacity(16 + dataset.images.len());
    img.extend_from_slice(&MNIST_IMAGE_MAGIC.to_be_bytes());
    for v in [n, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(dataset.images.data().iter().map(|&p| to_byte(p)));
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&MNIST_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(dataset.labels.iter().map(|&y| y as u8));
    (img, lab)
}

fn to_byte(p: f64) -> u8 {
    (p * 255.0).round() as u8
}

/// Parses CIFAR-10 binary batches: each record is one label byte followed by
/// the R, G and B planes of a 32×32 image.
pub fn load_cifar10(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_maybe_gz(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::Format {
                path: path.clone(),
                reason: format!("{} bytes is not a multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            let label = usize::from(record[0]);
            if label >= NUM_CLASSES {
                return Err(Error::Label(format!("label byte {label} in {}", path.display())));
            }
            labels.push(label);
            pixels.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, DatasetName::Cifar10, split, NUM_CLASSES)
}

pub fn cifar10_paths(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

pub fn load_cifar10_dir(dir: &Path, split: Split) -> Result<Dataset> {
    load_cifar10(&cifar10_paths(dir, split), split)
}

/// Re-encodes a CIFAR-10 dataset as one contiguous run of binary records.
pub fn encode_cifar10(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD_BYTES);
    for (i, &y) in dataset.labels.iter().enumerate() {
        out.push(y as u8);
        out.extend(dataset.images.row(i).iter().map(|&p| to_byte(p)));
    }
    out
}

/// Symmetric label noise: rate in `[0, 1]`, seeded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub rate: f64,
    pub seed: u64,
}

/// Replaces each label, with probability `rate`, by one drawn uniformly from
/// the other `C - 1` classes. Returns the noisy copy and the flip mask.
pub fn inject_label_noise(dataset: &Dataset, spec: &NoiseSpec) -> Result<(Dataset, Vec<bool>)> {
    if dataset.split != Split::Train {
        return Err(Error::Contract("label noise may only be applied to the train split".into()));
    }
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(Error::Config(format!("noise rate {} outside [0, 1]", spec.rate)));
    }
    let c = dataset.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = dataset.labels.clone();
    let mut flipped = vec![false; labels.len()];
    for (y, f) in labels.iter_mut().zip(&mut flipped) {
        if rng.gen::<f64>() < spec.rate {
            let r = rng.gen_range(0..c - 1);
            *y = if r >= *y { r + 1 } else { r };
            *f = true;
        }
    }
    Ok((
        Dataset {
            images: dataset.images.clone(),
            labels,
            ..*dataset
        },
        flipped,
    ))
}

/// Seeded permutation for one epoch.
pub fn epoch_order(len: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffled mini-batches covering every example exactly once.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let images = self.dataset.images.select_rows(idx).expect("indices from a permutation");
        let labels = idx.iter().map(|&i| self.dataset.labels[i]).collect();
        Some((images, labels))
    }
}

pub fn batch_iter(dataset: &Dataset, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    Ok(BatchIter {
        dataset,
        order: epoch_order(dataset.len(), shuffle_seed, epoch),
        batch_size,
        pos: 0,
    })
}
