//! Dataset ingestion: MNIST IDX (optionally gzipped), CIFAR-10 binary and a
//! seeded synthetic generator. Parsing is all-or-nothing; every failure
//! names the byte offset where it was detected.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images `[N, c, h, w]` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Per-channel standardization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn mnist() -> Self {
        Normalization { mean: vec![MNIST_MEAN], std: vec![MNIST_STD] }
    }

    pub fn cifar10() -> Self {
        Normalization { mean: CIFAR_MEAN.to_vec(), std: CIFAR_STD.to_vec() }
    }

    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[c, h, w]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers the samples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_vec(&shape, data).expect("batch shape"), labels)
    }

    pub fn take(&self, range: std::ops::Range<usize>) -> Dataset {
        let idx: Vec<usize> = range.collect();
        let (images, labels) = self.batch(&idx);
        Dataset { images, labels, classes: self.classes }
    }

    /// Last `test` samples become the test split.
    pub fn split_holdout(&self, test: usize) -> Result<Split> {
        if test == 0 || test >= self.len() {
            return Err(Error::Config(format!("holdout of {test} from {} samples", self.len())));
        }
        let cut = self.len() - test;
        Ok(Split { train: self.take(0..cut), test: self.take(cut..self.len()) })
    }

    /// Scales raw pixels by `1/255` and standardizes per channel.
    fn from_pixels(pixels: &[u8], labels: Vec<usize>, shape: [usize; 3], classes: usize, norm: &Normalization) -> Result<Self> {
        let [c, h, w] = shape;
        if norm.mean.len() != c || norm.std.len() != c || norm.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!("normalization does not fit {c} channels with positive std")));
        }
        let plane = h * w;
        let data = pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let ch = (i / plane) % c;
                (p as f32 / 255.0 - norm.mean[ch]) / norm.std[ch]
            })
            .collect();
        Ok(Dataset { images: Tensor::from_vec(&[labels.len(), c, h, w], data)?, labels, classes })
    }
}

/// Reads a file, transparently inflating gzip content.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Ingestion { offset: 0, message: format!("{}: gzip: {e}", path.display()) })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Ingestion { offset: bytes.len() as u64, message: "truncated header".into() })
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Ingestion { offset: 0, message: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}") });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Ingestion {
            offset: bytes.len() as u64,
            message: format!("truncated: header promises {n} images of {rows}x{cols} ({need} bytes)"),
        });
    }
    if bytes.len() > need {
        return Err(Error::Ingestion { offset: need as u64, message: "trailing bytes after last image".into() });
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// Parses an IDX label file; every label must be below `classes`.
pub fn parse_idx_labels(bytes: &[u8], classes: usize) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Ingestion { offset: 0, message: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}") });
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        let offset = bytes.len().min(8 + n) as u64;
        return Err(Error::Ingestion { offset, message: format!("header promises {n} labels, file holds {}", bytes.len().saturating_sub(8)) });
    }
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if (l as usize) < classes {
                Ok(l as usize)
            } else {
                Err(Error::Ingestion { offset: (8 + i) as u64, message: format!("label {l} out of range for {classes} classes") })
            }
        })
        .collect()
}

pub fn load_mnist(images: &Path, labels: &Path, norm: &Normalization) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(images)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels)?, 10)?;
    if labels.len() != n {
        return Err(Error::Ingestion { offset: 4, message: format!("{n} images but {} labels", labels.len()) });
    }
    Dataset::from_pixels(&pixels, labels, [1, rows, cols], 10, norm)
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar10(bytes: &[u8], norm: &Normalization) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(Error::Ingestion { offset, message: format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()) });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Ingestion { offset: (i * CIFAR_RECORD) as u64, message: format!("label {} out of range for 10 classes", rec[0]) });
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Dataset::from_pixels(&pixels, labels, [3, 32, 32], 10, norm)
}

pub fn load_cifar10(paths: &[&Path], norm: &Normalization) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(read_maybe_gz(p)?);
    }
    parse_cifar10(&bytes, norm)
}

/// Learnable synthetic classification data: each class owns a random
/// prototype image; samples are prototype plus Gaussian noise. Labels are
/// balanced round-robin and the order is shuffled.
pub fn synthetic(seed: u64, n: usize, shape: [usize; 3], classes: usize, noise: f32) -> Result<Dataset> {
    if classes == 0 || n == 0 {
        return Err(Error::Config("synthetic data needs at least one class and one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    let protos: Vec<Vec<f32>> = (0..classes).map(|_| (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let normal = Normal::new(0.0f32, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(n * len);
    for &l in &labels {
        data.extend(protos[l].iter().map(|&p| p + normal.sample(&mut rng)));
    }
    Ok(Dataset { images: Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], data)?, labels, classes })
}
