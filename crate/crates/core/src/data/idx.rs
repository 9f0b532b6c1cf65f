//! IDX container parsing (the MNIST file format).
//!
//! Layout: two zero bytes, a type code (0x08 = unsigned byte), the number of
//! dimensions, then one big-endian `u32` per dimension, then the payload.

use std::path::Path;

use super::{Dataset, FeatureLayout};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset: offset as u64,
            message: format!("truncated header: need 4 bytes, {} available", bytes.len().saturating_sub(offset)),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    let end = start + len;
    if bytes.len() < end {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            message: format!("truncated payload: expected {len} bytes from offset {start}, file ends early"),
        });
    }
    if bytes.len() > end {
        return Err(Error::Parse {
            offset: end as u64,
            message: format!("{} trailing bytes after payload", bytes.len() - end),
        });
    }
    Ok(&bytes[start..end])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = payload(bytes, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

pub fn write_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for v in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image/label file pair with pixels scaled to `[0, 1]`.
///
/// The class count is `max(label) + 1`. No standardization is applied here;
/// see [`super::Standardization`].
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let images = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path.as_ref())?)?;
    dataset_from_idx(&images, &labels, &images_path.display().to_string())
}

pub(crate) fn dataset_from_idx(images: &IdxImages, labels: &[u8], name: &str) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let d = images.rows * images.cols;
    let features = Tensor::new(
        vec![images.count, d],
        images.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let layout = if images.rows == images.cols {
        FeatureLayout::SquareImage {
            side: images.rows,
            channels: 1,
        }
    } else {
        FeatureLayout::FlatVector
    };
    Dataset::new(name, features, labels, classes, layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let images = IdxImages {
            count: 2,
            rows: 2,
            cols: 2,
            pixels: vec![0, 255, 51, 102, 255, 0, 0, 255],
        };
        (write_idx_images(&images), write_idx_labels(&[1, 0]))
    }

    #[test]
    fn hand_built_fixture_bytes() {
        let (img, lab) = fixture();
        assert_eq!(&img[..16], &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2]);
        assert_eq!(lab, vec![0, 0, 8, 1, 0, 0, 0, 2, 1, 0]);
        let ds = dataset_from_idx(&parse_idx_images(&img).unwrap(), &parse_idx_labels(&lab).unwrap(), "fx").unwrap();
        assert_eq!(ds.features.data(), &[0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.classes, 2);
        assert_eq!(ds.layout, FeatureLayout::SquareImage { side: 2, channels: 1 });
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let (mut img, _) = fixture();
        img[3] = 1;
        match parse_idx_images(&img) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_file_end() {
        let (img, _) = fixture();
        match parse_idx_images(&img[..img.len() - 1]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, img.len() as u64 - 1),
            other => panic!("{other:?}"),
        }
        match parse_idx_images(&img[..10]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let (img, _) = fixture();
        let lab = write_idx_labels(&[0, 1, 0]);
        let r = dataset_from_idx(&parse_idx_images(&img).unwrap(), &parse_idx_labels(&lab).unwrap(), "fx");
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
