use std::collections::BTreeMap;
use std::path::Path;

use crate::data::pool::{SourceGroup, SourcePool};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw contents of an IDX image file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `count · rows · cols` bytes, image-major.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.pixels[i * sz..(i + 1) * sz]
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::parse(
            "IDX",
            bytes.len() as u64,
            format!("file truncated while reading {what}"),
        ));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != expected {
        return Err(Error::parse(
            "IDX",
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        ));
    }
    Ok(())
}

fn check_payload(bytes: &[u8], start: usize, len: usize) -> Result<()> {
    let end = start + len;
    if bytes.len() < end {
        return Err(Error::parse(
            "IDX",
            bytes.len() as u64,
            format!("file truncated: header declares {len} payload bytes from offset {start}"),
        ));
    }
    if bytes.len() > end {
        return Err(Error::parse(
            "IDX",
            end as u64,
            format!("{} trailing bytes after payload", bytes.len() - end),
        ));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::parse("IDX", 8, format!("empty image geometry {rows}x{cols}")));
    }
    let len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::parse("IDX", 4, "declared size overflows"))?;
    check_payload(bytes, 16, len)?;
    Ok(IdxImages {
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = read_u32(bytes, 4, "label count")? as usize;
    check_payload(bytes, 8, count)?;
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count() as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads an image/label file pair into a pool grouped by label (ascending),
/// with pixels scaled by 1/255 and exemplars kept in file order.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<SourcePool> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    pool_from_idx(&images, &labels)
}

pub fn pool_from_idx(images: &IdxImages, labels: &[u8]) -> Result<SourcePool> {
    if images.count() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count(),
            labels: labels.len(),
        });
    }
    let mut grouped: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        let img = images.image(i).iter().map(|&p| p as f64 / 255.0).collect();
        grouped.entry(l as u32).or_default().push(img);
    }
    let groups = grouped
        .into_iter()
        .map(|(label, exemplars)| SourceGroup { label, exemplars })
        .collect();
    SourcePool::new(
        images.rows * images.cols,
        Some((images.rows, images.cols)),
        groups,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_white_pixel_scales_to_one() {
        let img = IdxImages {
            rows: 1,
            cols: 1,
            pixels: vec![255],
        };
        let pool = pool_from_idx(&img, &[3]).unwrap();
        assert_eq!(pool.groups()[0].label, 3);
        assert_eq!(pool.groups()[0].exemplars[0], vec![1.0]);
    }

    #[test]
    fn count_mismatch_detected() {
        let img = IdxImages {
            rows: 1,
            cols: 2,
            pixels: vec![0, 1, 2, 3],
        };
        assert!(matches!(
            pool_from_idx(&img, &[0, 1, 1]),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn header_counts_drive_parsing() {
        let img = IdxImages {
            rows: 28,
            cols: 28,
            pixels: vec![7; 3 * 784],
        };
        let bytes = encode_idx_images(&img);
        let parsed = parse_idx_images(&bytes).unwrap();
        assert_eq!(parsed.count(), 3);
        assert_eq!(parsed.rows * parsed.cols, 784);
        assert_eq!(parsed, img);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let mut bytes = encode_idx_labels(&[1, 2, 3]);
        bytes[3] = 0x03;
        match parse_idx_labels(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let bytes = encode_idx_labels(&[1, 2, 3]);
        match parse_idx_labels(&bytes[..9]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        match parse_idx_labels(&long) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 11),
            other => panic!("{other:?}"),
        }
        match parse_idx_images(&[0, 0]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
    }
}
