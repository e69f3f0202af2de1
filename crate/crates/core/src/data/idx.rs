use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(Error::Data("IDX file shorter than its header".into()));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != magic {
        return Err(Error::Data(format!(
            "IDX magic {:#010x}, expected {magic:#010x}",
            word(0)
        )));
    }
    let shape: Vec<usize> = (1..=dims).map(|i| word(i) as usize).collect();
    let body: usize = shape.iter().product();
    if bytes.len() != need + body {
        return Err(Error::Data(format!(
            "IDX body has {} bytes, header promises {body}",
            bytes.len() - need
        )));
    }
    Ok(shape)
}

/// Parses an IDX image file (`u8`, `N x H x W`) into pixels and `(H, W)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<u8>, (usize, usize))> {
    let s = header(bytes, IMAGES_MAGIC, 3)?;
    Ok((bytes[16..].to_vec(), (s[1], s[2])))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    header(bytes, LABELS_MAGIC, 1)?;
    Ok(bytes[8..].to_vec())
}

/// Loads a single-channel IDX image/label pair.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let ib = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (pixels, (h, w)) = parse_idx_images(&ib)?;
    Dataset::new(pixels, parse_idx_labels(&lb)?, (1, h, w), classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        std::fs::write(
            &ip,
            idx(0x803, &[2, 2, 3], &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]),
        )
        .unwrap();
        std::fs::write(&lp, idx(0x801, &[2], &[4, 1])).unwrap();
        let d = load_idx(&ip, &lp, 10).unwrap();
        assert_eq!(d.shape, (1, 2, 3));
        assert_eq!(d.labels, vec![4, 1]);
        assert_eq!(d.image(1), &[7, 8, 9, 10, 11, 12]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(parse_idx_labels(&idx(0x803, &[1], &[0])).is_err());
        assert!(parse_idx_images(&idx(0x803, &[1, 2, 2], &[0; 3])).is_err());
        assert!(parse_idx_labels(&[0, 0]).is_err());
    }
}
