//! Parsing of the IDX container used by MNIST-style datasets.
//!
//! Big-endian `u32` magic, `u32` count, then (images only) `u32` rows and
//! `u32` cols, then unsigned bytes.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{LabeledDataset, Role};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: at + 4,
            got: bytes.len(),
        })
}

/// Image file: returns `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IMAGES_MAGIC,
            got: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            got: bytes.len(),
        });
    }
    Ok((n, rows, cols, &bytes[16..need]))
}

/// Label file: returns the label bytes.
pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: LABELS_MAGIC,
            got: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            got: bytes.len(),
        });
    }
    Ok(&bytes[8..need])
}

/// Builds a single-channel dataset with pixels scaled by `1/255`.
pub fn dataset_from_idx(
    images: &[u8],
    labels: &[u8],
    name: impl Into<String>,
    role: Role,
    num_classes: usize,
) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_images(images)?;
    let label_bytes = parse_labels(labels)?;
    if label_bytes.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: label_bytes.len(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let data: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let inputs = Tensor::new([n, 1, rows, cols], data)?;
    let labels = label_bytes.iter().map(|&b| b as usize).collect();
    LabeledDataset::new(name, role, inputs, labels, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn labels(l: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [LABELS_MAGIC, l.len() as u32] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(l);
        b
    }

    #[test]
    fn hand_built_fixture() {
        let img = images(2, 2, 2, &[0, 255, 128, 64, 1, 2, 3, 4]);
        assert_eq!(&img[..4], &[0x00, 0x00, 0x08, 0x03]);
        let d = dataset_from_idx(&img, &labels(&[3, 7]), "fx", Role::VictimTrain, 10).unwrap();
        let first = d.inputs().row(0);
        let want = [0.0, 1.0, 0.50196, 0.25098];
        for (a, b) in first.iter().zip(want) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(d.labels(), &[3, 7]);
    }

    #[test]
    fn wrong_magic() {
        let lab = labels(&[1]);
        assert_eq!(
            parse_images(&lab).unwrap_err(),
            Error::BadMagic {
                expected: IMAGES_MAGIC,
                got: LABELS_MAGIC
            }
        );
    }

    #[test]
    fn count_mismatch() {
        let img = images(10, 1, 1, &[0; 10]);
        let err = dataset_from_idx(&img, &labels(&[0; 9]), "x", Role::VictimTrain, 10).unwrap_err();
        assert_eq!(err, Error::CountMismatch { images: 10, labels: 9 });
    }

    #[test]
    fn truncated_payload() {
        let img = images(2, 2, 2, &[0; 7]);
        assert!(matches!(parse_images(&img), Err(Error::Truncated { .. })));
        assert!(matches!(parse_labels(&[0, 0, 8]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn label_range_checked() {
        let img = images(1, 1, 1, &[9]);
        assert!(matches!(
            dataset_from_idx(&img, &labels(&[10]), "x", Role::VictimTrain, 10),
            Err(Error::LabelOutOfRange { .. })
        ));
        let _ = vec![0u8];
    }
}
