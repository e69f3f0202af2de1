use std::fs;
use std::path::Path;

use super::{carve_validation, Dataset, Splits};
use crate::error::{Error, Result};

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_BATCH_BYTES: usize = 10_000 * CIFAR_RECORD_BYTES;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

fn read_batch(path: &Path, images: &mut Vec<u8>, labels: &mut Vec<u8>) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != CIFAR_BATCH_BYTES {
        return Err(Error::FileSize {
            path: path.to_path_buf(),
            expected: CIFAR_BATCH_BYTES as u64,
            actual: bytes.len() as u64,
        });
    }
    parse_records(&bytes, images, labels)
}

pub(crate) fn parse_records(
    bytes: &[u8],
    images: &mut Vec<u8>,
    labels: &mut Vec<u8>,
) -> Result<()> {
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        if rec[0] > 9 {
            return Err(Error::Data(format!(
                "CIFAR-10 label {} out of range",
                rec[0]
            )));
        }
        labels.push(rec[0]);
        images.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

/// Loads the binary CIFAR-10 release from `dir` and carves `val_size`
/// training images into a validation split.
pub fn load_cifar10(dir: &Path, val_size: usize, seed: u64) -> Result<Splits> {
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for f in TRAIN_FILES {
        read_batch(&dir.join(f), &mut images, &mut labels)?;
    }
    let full = Dataset::new(images, labels, (3, 32, 32), 10)?;
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    read_batch(&dir.join(TEST_FILE), &mut images, &mut labels)?;
    let test = Dataset::new(images, labels, (3, 32, 32), 10)?;
    let (train, val) = carve_validation(&full, val_size, seed)?;
    Ok(Splits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_size_arithmetic() {
        assert_eq!(CIFAR_BATCH_BYTES, 30_730_000);
        assert_eq!(CIFAR_BATCH_BYTES / CIFAR_RECORD_BYTES, 10_000);
    }

    #[test]
    fn records_split_into_label_and_planes() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES];
        bytes[0] = 3;
        bytes[1] = 200;
        bytes[CIFAR_RECORD_BYTES] = 9;
        let (mut images, mut labels) = (Vec::new(), Vec::new());
        parse_records(&bytes, &mut images, &mut labels).unwrap();
        assert_eq!(labels, vec![3, 9]);
        assert_eq!(images.len(), 2 * 3072);
        assert_eq!(images[0], 200);
        bytes[0] = 10;
        assert!(parse_records(&bytes, &mut Vec::new(), &mut Vec::new()).is_err());
    }

    #[test]
    fn wrong_file_size_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data_batch_1.bin"), vec![0u8; 100]).unwrap();
        match load_cifar10(dir.path(), 5000, 0) {
            Err(Error::FileSize {
                expected, actual, ..
            }) => {
                assert_eq!((expected, actual), (30_730_000, 100));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let err = load_cifar10(Path::new("/nonexistent/cifar"), 10, 0).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }
}
