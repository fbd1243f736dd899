//! Datasets: IDX and CIFAR-10 binary parsers, a seeded synthetic
//! classification generator, and split/batch utilities.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::seeds;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 1024;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated {what}: need {needed} bytes, have {available}")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("CIFAR file length {0} is not a multiple of 3073")]
    CifarLength(usize),
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    Ratios([f64; 3]),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid dataset URI `{0}`")]
    Uri(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    name: String,
}

impl Dataset {
    /// Features are `[n, d]` or `[n, h, w, c]` with values in `[0, 1]`.
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        let n = features.shape()[0];
        if n == 0 || labels.len() != n {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if !matches!(features.shape().len(), 2 | 4) {
            return Err(DataError::Invalid(format!(
                "feature shape {:?} is neither [n,d] nor [n,h,w,c]",
                features.shape()
            )));
        }
        if num_classes < 2 {
            return Err(DataError::Invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::LabelRange {
                label,
                classes: num_classes,
            });
        }
        if features.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Invalid("feature values must lie in [0, 1]".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Per-example shape, e.g. `[d]` or `[h, w, c]`.
    pub fn row_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn row_len(&self) -> usize {
        self.row_shape().iter().product()
    }

    /// Features and labels of the given rows, in order.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.select_rows(rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }

    pub fn subset(&self, rows: &[usize], name: impl Into<String>) -> Self {
        let (features, labels) = self.batch(rows);
        Self {
            features,
            labels,
            num_classes: self.num_classes,
            name: name.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            what,
            needed: at + 4,
            available: bytes.len(),
        })
}

/// Parses an IDX image container into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "IDX image header")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "IDX image header")? as usize;
    let rows = be_u32(bytes, 8, "IDX image header")? as usize;
    let cols = be_u32(bytes, 12, "IDX image header")? as usize;
    let needed = 16 + n * rows * cols;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            what: "IDX image payload",
            needed,
            available: bytes.len(),
        });
    }
    Ok((n, rows, cols, &bytes[16..needed]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "IDX label header")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABEL_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "IDX label header")? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            what: "IDX label payload",
            needed,
            available: bytes.len(),
        });
    }
    Ok(&bytes[8..needed])
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), n * rows * cols, "pixel count must match header");
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a `[n, rows, cols, 1]` dataset from raw IDX image and label bytes.
pub fn dataset_from_idx(images: &[u8], labels: &[u8], name: &str) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if n != labels.len() {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Invalid("IDX file holds no pixels".into()));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let values = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let features = Tensor::new(vec![n, rows, cols, 1], values).expect("header dims match payload");
    Dataset::new(features, labels, num_classes, name)
}

pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let images = read_file(image_path)?;
    let labels = read_file(label_path)?;
    dataset_from_idx(&images, &labels, &image_path.display().to_string())
}

/// Parses concatenated CIFAR-10 records into a `[n, 32, 32, 3]` dataset.
pub fn dataset_from_cifar(bytes: &[u8], name: &str) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(DataError::CifarLength(bytes.len()));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * 3072);
    for record in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(DataError::LabelRange {
                label,
                classes: CIFAR_CLASSES,
            });
        }
        labels.push(label);
        let planes = &record[1..];
        // channel-major planes -> interleaved HWC
        for pixel in 0..1024 {
            for channel in 0..3 {
                values.push(planes[channel * 1024 + pixel] as f64 / 255.0);
            }
        }
    }
    let features = Tensor::new(vec![n, 32, 32, 3], values).expect("record layout is fixed");
    Dataset::new(features, labels, CIFAR_CLASSES, name)
}

pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for path in paths {
        let chunk = read_file(path.as_ref())?;
        if chunk.is_empty() || chunk.len() % CIFAR_RECORD_LEN != 0 {
            return Err(DataError::CifarLength(chunk.len()));
        }
        bytes.extend_from_slice(&chunk);
    }
    let name = paths
        .iter()
        .map(|p| p.as_ref().display().to_string())
        .collect::<Vec<_>>()
        .join(",");
    dataset_from_cifar(&bytes, &name)
}

/// `k` Gaussian clusters in `d` dimensions with isotropic noise `noise`,
/// min-max rescaled per feature into `[0, 1]`. Labels cycle `0..k`.
pub fn synth_classification(seed: u64, n: usize, d: usize, k: usize, noise: f64) -> Result<Dataset> {
    if k < 2 || n < k || d == 0 {
        return Err(DataError::Invalid(format!(
            "synthetic task needs k >= 2, n >= k, d >= 1 (got n={n}, d={d}, k={k})"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(DataError::Invalid(format!("noise must be a finite σ >= 0, got {noise}")));
    }
    let mut rng = seeds::rng(seed);
    let centers: Vec<f64> = (0..k * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut values = Vec::with_capacity(n * d);
    for &label in &labels {
        for j in 0..d {
            let eps: f64 = StandardNormal.sample(&mut rng);
            values.push(centers[label * d + j] + noise * eps);
        }
    }
    for j in 0..d {
        let column = values.iter().skip(j).step_by(d);
        let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        for v in values.iter_mut().skip(j).step_by(d) {
            *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    let features = Tensor::new(vec![n, d], values).expect("n*d values generated");
    Dataset::new(features, labels, k, SynthSpec { seed, n, d, k, noise }.to_string())
}

fn part_size(n: usize, ratio: f64) -> usize {
    // tolerate representation error in ratios like 1/7
    ((n as f64 * ratio) + 1e-9).floor() as usize
}

/// Seeded shuffle, then contiguous train/validation/test cut. Validation
/// and test take `floor(n * ratio)` rows; the remainder goes to train.
pub fn split(ds: &Dataset, ratios: [f64; 3], seed: u64) -> Result<Split> {
    let [train, val, test] = split_indices(ds.len(), ratios, seed)?;
    let part = |rows: &[usize], tag: &str| -> Result<Dataset> {
        if rows.is_empty() {
            return Err(DataError::Invalid(format!(
                "{tag} split of {} is empty; every part needs at least one row",
                ds.name()
            )));
        }
        Ok(ds.subset(rows, format!("{}#{tag}", ds.name())))
    };
    Ok(Split {
        train: part(&train, "train")?,
        validation: part(&val, "validation")?,
        test: part(&test, "test")?,
    })
}

/// Index sets of a split without materializing datasets (empty parts allowed).
pub fn split_indices(n: usize, ratios: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| r.is_nan() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::Ratios(ratios));
    }
    let n_val = part_size(n, ratios[1]);
    let n_test = part_size(n, ratios[2]);
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed));
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok([order, val, test])
}

/// Seeded permutation of `0..n` chunked into batches; the short tail is kept.
pub fn batch_indices(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(DataError::Invalid(format!(
            "batch size {batch_size} must be in 1..={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batches(ds: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    batch_indices(ds.len(), batch_size, epoch_seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub noise: f64,
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "synth://{}/{}/{}/{}/{}", self.seed, self.n, self.d, self.k, self.noise)
    }
}

/// Dataset locator used in configs.
///
/// * `synth://seed/n/d/k/noise`
/// * `idx://images_path,labels_path`
/// * `cifar://path[,path...]`
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetUri {
    Synth(SynthSpec),
    Idx { images: PathBuf, labels: PathBuf },
    Cifar(Vec<PathBuf>),
}

impl DatasetUri {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetUri::Synth(s) => synth_classification(s.seed, s.n, s.d, s.k, s.noise),
            DatasetUri::Idx { images, labels } => load_idx(images, labels),
            DatasetUri::Cifar(paths) => load_cifar_binary(paths),
        }
    }
}

impl FromStr for DatasetUri {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || DataError::Uri(s.to_string());
        if let Some(rest) = s.strip_prefix("synth://") {
            let parts: Vec<&str> = rest.split('/').collect();
            let [seed, n, d, k, noise] = parts[..] else {
                return Err(bad());
            };
            return Ok(DatasetUri::Synth(SynthSpec {
                seed: seed.parse().map_err(|_| bad())?,
                n: n.parse().map_err(|_| bad())?,
                d: d.parse().map_err(|_| bad())?,
                k: k.parse().map_err(|_| bad())?,
                noise: noise.parse().map_err(|_| bad())?,
            }));
        }
        if let Some(rest) = s.strip_prefix("idx://") {
            let (images, labels) = rest.split_once(',').ok_or_else(bad)?;
            return Ok(DatasetUri::Idx {
                images: images.into(),
                labels: labels.into(),
            });
        }
        if let Some(rest) = s.strip_prefix("cifar://") {
            let paths: Vec<PathBuf> = rest.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect();
            if paths.is_empty() {
                return Err(bad());
            }
            return Ok(DatasetUri::Cifar(paths));
        }
        Err(bad())
    }
}

impl fmt::Display for DatasetUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetUri::Synth(s) => s.fmt(f),
            DatasetUri::Idx { images, labels } => write!(f, "idx://{},{}", images.display(), labels.display()),
            DatasetUri::Cifar(paths) => {
                let joined: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
                write!(f, "cifar://{}", joined.join(","))
            }
        }
    }
}
