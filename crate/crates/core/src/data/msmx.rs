//! Binary matrix container.
//!
//! Layout: the 8 ASCII bytes `MSMX0001`, `N` and `D` as little-endian `u64`,
//! then `N·D` little-endian `f64` values row-major. Optional blocks follow,
//! each a 4-byte ASCII tag, a little-endian `u64` payload length and the
//! payload:
//!
//! - `META`: UTF-8 JSON of [`DatasetMeta`]
//! - `TRUS`: `K` as `u64`, then `N·K` bytes of presence bits
//! - `COMP`: `N·K·D` `f64` clean components (requires `TRUS`)
//! - `NOIS`: `N·D` `f64` noise draws

use std::path::Path;

use crate::data::dataset::{DatasetMeta, MixtureDataset};
use crate::error::{Error, Result};

pub const MSMX_MAGIC: &[u8; 8] = b"MSMX0001";

const FORMAT: &str = "MSMX";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::parse(
                FORMAT,
                self.pos as u64,
                format!(
                    "truncated {what}: need {len} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(8)
            .ok_or_else(|| Error::parse(FORMAT, self.pos as u64, format!("{what} size overflows")))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn checked_len(a: usize, b: usize, offset: usize) -> Result<usize> {
    a.checked_mul(b)
        .ok_or_else(|| Error::parse(FORMAT, offset as u64, "declared size overflows"))
}

/// Parses a full container, including any optional blocks.
pub fn decode_dataset(bytes: &[u8]) -> Result<MixtureDataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MSMX_MAGIC {
        return Err(Error::parse(
            FORMAT,
            0,
            format!("bad magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let n = r.u64("row count")? as usize;
    let d = r.u64("column count")? as usize;
    let nd = checked_len(n, d, 8)?;
    let x_start = r.pos;
    let x = r.f64s(nd, "matrix payload")?;
    let mut ds = MixtureDataset::from_features(n, d, x).map_err(|e| match e {
        Error::Dimension(detail) => Error::parse(FORMAT, x_start as u64, detail),
        other => other,
    })?;

    let mut meta = None;
    let mut truth: Option<(usize, Vec<u8>)> = None;
    let mut comps = None;
    let mut noise = None;
    while r.remaining() > 0 {
        let tag_at = r.pos;
        let tag = r.take(4, "block tag")?;
        let seen = match tag {
            b"META" => meta.is_some(),
            b"TRUS" => truth.is_some(),
            b"COMP" => comps.is_some(),
            b"NOIS" => noise.is_some(),
            _ => {
                return Err(Error::parse(
                    FORMAT,
                    tag_at as u64,
                    format!("unknown block tag {:?}", String::from_utf8_lossy(tag)),
                ))
            }
        };
        if seen {
            return Err(Error::parse(FORMAT, tag_at as u64, "duplicate block"));
        }
        let len = r.u64("block length")? as usize;
        let body_at = r.pos;
        let body = r.take(len, "block payload")?;
        let mut br = Reader {
            bytes: body,
            pos: 0,
        };
        let at = |e: Error| match e {
            Error::Parse { format, offset, detail } => Error::Parse {
                format,
                offset: offset + body_at as u64,
                detail,
            },
            other => other,
        };
        match tag {
            b"META" => {
                let m: DatasetMeta = serde_json::from_slice(body).map_err(|e| {
                    Error::parse(FORMAT, body_at as u64, format!("metadata block: {e}"))
                })?;
                meta = Some(m);
            }
            b"TRUS" => {
                let k = br.u64("source count").map_err(at)? as usize;
                let bits = br.take(checked_len(n, k, body_at)?, "truth bits").map_err(at)?;
                if let Some(i) = bits.iter().position(|&b| b > 1) {
                    return Err(Error::parse(
                        FORMAT,
                        (body_at + 8 + i) as u64,
                        format!("truth entry {} is not binary", bits[i]),
                    ));
                }
                truth = Some((k, bits.to_vec()));
            }
            b"COMP" => {
                let k = truth.as_ref().map(|t| t.0).ok_or_else(|| {
                    Error::parse(FORMAT, tag_at as u64, "component block before truth block")
                })?;
                comps = Some(br.f64s(checked_len(nd, k, body_at)?, "components").map_err(at)?);
            }
            _ => {
                noise = Some(br.f64s(nd, "noise").map_err(at)?);
            }
        }
        if br.remaining() > 0 && tag != b"META" {
            return Err(Error::parse(
                FORMAT,
                (body_at + br.pos) as u64,
                format!("{} unexpected bytes inside block", br.remaining()),
            ));
        }
    }
    if let Some(m) = meta {
        ds.meta = m;
    }
    if let Some((k, bits)) = truth {
        ds.set_truth(k, bits)?;
    }
    if let Some(c) = comps {
        ds.set_components(c)?;
    }
    if let Some(v) = noise {
        ds.set_noise(v)?;
    }
    Ok(ds)
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_block(out: &mut Vec<u8>, tag: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
}

/// Serializes a dataset; the `META` block is omitted when metadata is empty.
pub fn encode_dataset(ds: &MixtureDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + ds.features().len() * 8);
    out.extend_from_slice(MSMX_MAGIC);
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.dim() as u64).to_le_bytes());
    push_f64s(&mut out, ds.features());
    if ds.meta != DatasetMeta::default() {
        let json = serde_json::to_vec(&ds.meta).expect("metadata serializes");
        push_block(&mut out, b"META", &json);
    }
    if let (Some(k), Some(bits)) = (ds.num_sources(), ds.truth_flat()) {
        let mut body = (k as u64).to_le_bytes().to_vec();
        body.extend_from_slice(bits);
        push_block(&mut out, b"TRUS", &body);
    }
    if let Some(c) = ds.components_flat() {
        let mut body = Vec::with_capacity(c.len() * 8);
        push_f64s(&mut body, c);
        push_block(&mut out, b"COMP", &body);
    }
    if let Some(v) = ds.noise_flat() {
        let mut body = Vec::with_capacity(v.len() * 8);
        push_f64s(&mut body, v);
        push_block(&mut out, b"NOIS", &body);
    }
    out
}

pub fn save_dataset(ds: &MixtureDataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<MixtureDataset> {
    decode_dataset(&std::fs::read(path)?)
}

/// Loads only the observation matrix; any truth blocks are validated and
/// then dropped.
pub fn load_matrix(path: &Path) -> Result<MixtureDataset> {
    Ok(load_dataset(path)?.features_only())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MixtureDataset {
        let mut ds = MixtureDataset::from_features(2, 2, vec![0.1, -2.5, 1e-300, 7.0]).unwrap();
        ds.set_truth(1, vec![1, 0]).unwrap();
        ds.set_components(vec![0.1, -2.5, 0.0, 0.0]).unwrap();
        ds.set_noise(vec![0.0, 0.0, 1e-300, 7.0]).unwrap();
        ds.meta.seed = Some(u64::MAX);
        ds.meta.b_gen = Some(0.1);
        ds
    }

    #[test]
    fn empty_matrix_is_valid() {
        let ds = MixtureDataset::from_features(0, 5, vec![]).unwrap();
        let back = decode_dataset(&encode_dataset(&ds)).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 5);
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let ds = sample();
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back), bytes);
    }

    #[test]
    fn inconsistent_header_rejected() {
        let ds = MixtureDataset::from_features(2, 2, vec![1.0; 4]).unwrap();
        let mut bytes = encode_dataset(&ds);
        bytes[8] = 3;
        match decode_dataset(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("{other:?}"),
        }
        bytes[8] = 1;
        match decode_dataset(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 40),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected_at_zero() {
        let mut bytes = encode_dataset(&sample());
        bytes[4] = b'9';
        assert!(matches!(
            decode_dataset(&bytes),
            Err(Error::Parse { offset: 0, .. })
        ));
    }
}
