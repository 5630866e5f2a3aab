use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, Dataset};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_BATCH_BYTES: u64 = 10_000 * CIFAR_RECORD_BYTES as u64;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Per-channel mean and standard deviation of the CIFAR-10 training pixels in [0, 1].
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone)]
pub struct CifarSplits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Splits one record into its label and its 3072 pixel bytes (R, G, B planes).
pub fn parse_record(record: &[u8]) -> Result<(u8, &[u8]), DataError> {
    if record.len() != CIFAR_RECORD_BYTES {
        return Err(DataError::Invalid(format!(
            "record has {} bytes, expected {CIFAR_RECORD_BYTES}",
            record.len()
        )));
    }
    if record[0] > 9 {
        return Err(DataError::BadLabel(record[0]));
    }
    Ok((record[0], &record[1..]))
}

pub fn encode_record(label: u8, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + pixels.len());
    out.push(label);
    out.extend_from_slice(pixels);
    out
}

fn read_batches(files: &[PathBuf]) -> Result<Dataset, DataError> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in files {
        if !path.is_file() {
            return Err(DataError::MissingFile(path.clone()));
        }
        let size = fs::metadata(path)?.len();
        if size != CIFAR_BATCH_BYTES {
            return Err(DataError::FileSize {
                path: path.clone(),
                expected: CIFAR_BATCH_BYTES,
                actual: size,
            });
        }
        let bytes = fs::read(path)?;
        for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            let (label, pixels) = parse_record(record)?;
            labels.push(label as usize);
            for (ch, plane) in pixels.chunks_exact(1024).enumerate() {
                data.extend(plane.iter().map(|&p| (p as f64 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]));
            }
        }
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(images, labels, 10)
}

/// Loads the binary CIFAR-10 batches from `dir` (or its `cifar-10-batches-bin`
/// subdirectory), standardized per channel.
pub fn load_cifar10(dir: &Path) -> Result<CifarSplits, DataError> {
    let nested = dir.join("cifar-10-batches-bin");
    let root = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let train: Vec<PathBuf> = CIFAR_TRAIN_FILES.iter().map(|f| root.join(f)).collect();
    Ok(CifarSplits {
        train: read_batches(&train)?,
        test: read_batches(&[root.join(CIFAR_TEST_FILE)])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_size_arithmetic() {
        assert_eq!(CIFAR_BATCH_BYTES, 30_730_000);
    }

    #[test]
    fn record_round_trips() {
        let mut record = vec![7u8];
        record.extend((0..3072).map(|i| (i * 31 % 256) as u8));
        let (label, pixels) = parse_record(&record).unwrap();
        assert_eq!(encode_record(label, pixels), record);
    }

    #[test]
    fn missing_directory_is_structured() {
        let err = load_cifar10(Path::new("/nonexistent/cifar")).unwrap_err();
        assert!(matches!(err, DataError::MissingFile(_)));
    }

    #[test]
    fn wrong_size_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for f in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
            fs::write(dir.path().join(f), vec![0u8; 3073]).unwrap();
        }
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(matches!(err, DataError::FileSize { actual: 3073, .. }));
    }

    #[test]
    fn parses_a_valid_batch() {
        let dir = tempfile::tempdir().unwrap();
        let mut batch = Vec::with_capacity(CIFAR_BATCH_BYTES as usize);
        for i in 0..10_000 {
            batch.push((i % 10) as u8);
            batch.extend(std::iter::repeat_n(128u8, 3072));
        }
        let path = dir.path().join(CIFAR_TEST_FILE);
        fs::write(&path, &batch).unwrap();
        let test = read_batches(&[path]).unwrap();
        assert_eq!(test.len(), 10_000);
        assert_eq!(test.label_histogram(), vec![1000; 10]);
        let expect = (128.0 / 255.0 - CIFAR_MEAN[1]) / CIFAR_STD[1];
        assert_eq!(test.image(0)[1024], expect);
    }
}
