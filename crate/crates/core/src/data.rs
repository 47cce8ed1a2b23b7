//! Dataset ingestion: IDX files, CIFAR-10 binary batches, and seeded
//! Gaussian-cluster data.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{QkdError, Result};
use crate::tensor::Tensor;

/// Bytes in one CIFAR-10 binary record: a label then 3×32×32 pixels.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Labeled samples stored contiguously, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    data: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, data: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let row: usize = sample_shape.iter().product();
        if row == 0 || data.len() != row * labels.len() {
            return Err(QkdError::Dimension(format!(
                "{} values do not form {} samples of shape {:?}",
                data.len(),
                labels.len(),
                sample_shape
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(QkdError::Contract(format!("label {} out of range for {} classes", y, num_classes)));
        }
        Ok(Dataset {
            sample_shape,
            data,
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

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    fn row(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Inputs and labels of the given samples, in order.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let row = self.row();
        let mut data = Vec::with_capacity(idx.len() * row);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(QkdError::Dimension(format!("sample {} out of {}", i, self.len())));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// Contiguous batch `[start, end)`.
    pub fn range(&self, start: usize, end: usize) -> Result<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        self.batch(&idx)
    }

    /// Global mean and standard deviation over every value.
    pub fn mean_std(&self) -> (f64, f64) {
        if self.data.is_empty() {
            return (0.0, 1.0);
        }
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
    }

    pub fn normalize(&mut self, norm: Normalization) {
        for v in &mut self.data {
            *v = (*v - norm.mean) / norm.std;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

/// Raw contents of an unsigned-byte IDX file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX file holding unsigned bytes (type code 0x08).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(QkdError::format(bytes.len() as u64, "truncated IDX header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(QkdError::format(0, "bad IDX magic, expected two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(QkdError::format(2, format!("unsupported IDX type 0x{:02x}, expected 0x08", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(QkdError::format(3, "IDX file declares zero dimensions"));
    }
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let at = 4 + 4 * d;
        let Some(b) = bytes.get(at..at + 4) else {
            return Err(QkdError::format(bytes.len() as u64, format!("truncated IDX dimension {}", d)));
        };
        dims.push(u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize);
    }
    let start = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let payload = bytes.len() - start;
    if payload != expected {
        return Err(QkdError::format(
            (start + payload.min(expected)) as u64,
            format!("dimensions {:?} need {} payload bytes, found {}", dims, expected, payload),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[start..].to_vec(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| QkdError::io(path, e))
}

/// Loads an IDX image file and its IDX label file. Pixels are scaled to
/// `[0, 1]`; 3-D image files become `N×1×H×W`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let img = parse_idx(&read(images.as_ref())?)?;
    let lab = parse_idx(&read(labels.as_ref())?)?;
    if lab.dims.len() != 1 {
        return Err(QkdError::format(3, format!("label file must be 1-D, got {:?}", lab.dims)));
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(QkdError::format(4, format!("{} labels for {} images", lab.dims[0], n)));
    }
    let sample_shape = match img.dims[1..] {
        [h, w] => vec![1, h, w],
        [] => vec![1],
        ref rest => rest.to_vec(),
    };
    let start = 4 + 4 * lab.dims.len();
    let mut labels = Vec::with_capacity(n);
    for (i, &y) in lab.data.iter().enumerate() {
        if y as usize >= num_classes {
            return Err(QkdError::format(
                (start + i) as u64,
                format!("label {} out of range for {} classes", y, num_classes),
            ));
        }
        labels.push(y as usize);
    }
    let data = img.data.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(sample_shape, data, labels, num_classes)
}

/// Parses CIFAR-10 binary records into `N×3×32×32` samples in `[0, 1]`.
pub fn parse_cifar_binary(bytes: &[u8], num_classes: usize) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(QkdError::format(
            (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            format!("length {} is not a multiple of {}", bytes.len(), CIFAR_RECORD),
        ));
    }
    if bytes.is_empty() {
        log::warn!("CIFAR binary input is empty; dataset has zero samples");
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let y = rec[0] as usize;
        if y >= num_classes {
            return Err(QkdError::format(
                (i * CIFAR_RECORD) as u64,
                format!("label {} out of range for {} classes", y, num_classes),
            ));
        }
        labels.push(y);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(vec![3, 32, 32], data, labels, num_classes)
}

pub fn load_cifar_binary(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    parse_cifar_binary(&read(path.as_ref())?, num_classes)
}

/// Generator settings for Gaussian-cluster data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub num_classes: usize,
    pub dimension: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Standard deviation of each cluster around its centre.
    pub spread: f64,
    /// Standard deviation of the cluster centres around the origin.
    pub center_scale: f64,
    /// Clusters per class. Above 1 the classes are Gaussian mixtures and
    /// no longer linearly separable, which gives wider networks an edge.
    pub clusters_per_class: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            num_classes: 10,
            dimension: 16,
            train_samples: 8000,
            test_samples: 5000,
            spread: 0.8,
            center_scale: 1.0,
            clusters_per_class: 2,
        }
    }
}

/// Gaussian clusters (`clusters_per_class` per class, each sample from a
/// uniformly chosen one), classes balanced, order shuffled. Train and test
/// samples are drawn independently from the same clusters.
pub fn gen_synthetic(p: &SyntheticParams, seed: u64) -> Result<(Dataset, Dataset)> {
    if p.num_classes < 2 || p.dimension < 2 {
        return Err(QkdError::Config("synthetic data needs >= 2 classes and >= 2 dimensions".into()));
    }
    if p.train_samples == 0 || p.test_samples == 0 {
        return Err(QkdError::Config("synthetic splits must be non-empty".into()));
    }
    if p.clusters_per_class == 0 {
        return Err(QkdError::Config("clusters_per_class must be positive".into()));
    }
    let k = p.clusters_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..p.num_classes * k * p.dimension)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            p.center_scale * z
        })
        .collect();
    let mut draw = |n: usize| {
        let mut labels: Vec<usize> = (0..n).map(|i| i % p.num_classes).collect();
        labels.shuffle(&mut rng);
        let mut data = Vec::with_capacity(n * p.dimension);
        for &y in &labels {
            let c = if k > 1 { y * k + rng.gen_range(0..k) } else { y };
            for d in 0..p.dimension {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(centers[c * p.dimension + d] + p.spread * noise);
            }
        }
        Dataset::new(vec![p.dimension], data, labels, p.num_classes)
    };
    let train = draw(p.train_samples)?;
    let test = draw(p.test_samples)?;
    Ok((train, test))
}

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetDescriptor {
    SyntheticGaussianClusters(SyntheticParams),
    IdxImages {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        num_classes: usize,
        #[serde(default)]
        max_train: Option<usize>,
    },
    CifarBinary {
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
        #[serde(default = "ten")]
        num_classes: usize,
        #[serde(default)]
        max_train: Option<usize>,
    },
}

fn ten() -> usize {
    10
}

impl Default for DatasetDescriptor {
    fn default() -> Self {
        DatasetDescriptor::SyntheticGaussianClusters(SyntheticParams::default())
    }
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut it = parts.into_iter();
    let mut first = it
        .next()
        .ok_or_else(|| QkdError::Config("no dataset files given".into()))?;
    for d in it {
        if d.sample_shape != first.sample_shape {
            return Err(QkdError::Dimension("dataset files disagree on sample shape".into()));
        }
        first.data.extend(d.data);
        first.labels.extend(d.labels);
    }
    Ok(first)
}

fn truncate(mut d: Dataset, max: Option<usize>) -> Dataset {
    if let Some(m) = max.filter(|&m| m < d.len()) {
        let row = d.row();
        d.labels.truncate(m);
        d.data.truncate(m * row);
    }
    d
}

/// Loads (or generates) the train/test split and normalizes both with the
/// given constants, or with the train split's global mean/std when `norm`
/// is `None`. Returns the constants used.
pub fn prepare(desc: &DatasetDescriptor, seed: u64, norm: Option<Normalization>) -> Result<(Dataset, Dataset, Normalization)> {
    let (mut train, mut test) = match desc {
        DatasetDescriptor::SyntheticGaussianClusters(p) => gen_synthetic(p, seed)?,
        DatasetDescriptor::IdxImages {
            train_images,
            train_labels,
            test_images,
            test_labels,
            num_classes,
            max_train,
        } => (
            truncate(load_idx(train_images, train_labels, *num_classes)?, *max_train),
            load_idx(test_images, test_labels, *num_classes)?,
        ),
        DatasetDescriptor::CifarBinary {
            train_files,
            test_files,
            num_classes,
            max_train,
        } => {
            let tr = train_files
                .iter()
                .map(|f| load_cifar_binary(f, *num_classes))
                .collect::<Result<Vec<_>>>()?;
            let te = test_files
                .iter()
                .map(|f| load_cifar_binary(f, *num_classes))
                .collect::<Result<Vec<_>>>()?;
            (truncate(concat(tr)?, *max_train), concat(te)?)
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(QkdError::Config("train and test splits must be non-empty".into()));
    }
    let norm = norm.unwrap_or_else(|| {
        let (mean, std) = train.mean_std();
        Normalization { mean, std }
    });
    train.normalize(norm);
    test.normalize(norm);
    Ok((train, test, norm))
}
