//! Datasets, non-IID partitioning, per-client splits, and augmentation.

mod augment;
mod cifar;
mod partition;
mod synthetic;

use std::path::PathBuf;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;

pub use augment::{augment, AugmentChoice, AUGMENT_PAD};
pub use cifar::{
    encode_record, load_cifar10, parse_record, CifarSplits, CIFAR_BATCH_BYTES, CIFAR_MEAN, CIFAR_RECORD_BYTES, CIFAR_STD, CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
};
pub use partition::{class_count_csv, class_counts, dirichlet_partition, train_val_split, ClientShard, Partition, PartitionSpec};
pub use synthetic::{synthesize_dataset, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid partition spec: {0}")]
    InvalidSpec(String),
    #[error("client {0} received no samples")]
    EmptyClient(usize),
    #[error("shard of {0} samples cannot be split into train and validation parts")]
    ShardTooSmall(usize),
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: expected {expected} bytes, found {actual}")]
    FileSize { path: PathBuf, expected: u64, actual: u64 },
    #[error("record label {0} is out of range")]
    BadLabel(u8),
    #[error("partition file: {0}")]
    PartitionFormat(String),
    #[error("index {index} out of range for a dataset of {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Images `[n, c, h, w]` with one integer label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        let (n, ..) = images.dims4().map_err(|e| DataError::Invalid(e.to_string()))?;
        if n == 0 {
            return Err(DataError::Invalid("dataset is empty".into()));
        }
        if labels.len() != n {
            return Err(DataError::Invalid(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            images,
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `(c, h, w)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let (c, h, w) = self.image_shape();
        let size = c * h * w;
        &self.images.data()[index * size..(index + 1) * size]
    }

    /// Copies the selected samples into a batch, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>), DataError> {
        let (c, h, w) = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::IndexOutOfRange { index: i, len: self.len() });
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let images = Tensor::new(vec![indices.len(), c, h, w], data).map_err(|e| DataError::Invalid(e.to_string()))?;
        Ok((images, labels))
    }

    /// A new dataset holding the selected samples.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        let (images, labels) = self.gather(indices)?;
        Dataset::new(images, labels, self.num_classes)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// SHA-256 over the shape, the raw little-endian pixel values and the labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }
}
