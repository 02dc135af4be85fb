//! `RGI1` parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes   "RGI1"
//! count      u32       number of matrices
//! repeated count times:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   rows     u64
//!   cols     u64
//!   values   rows*cols f64, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RGI1";

pub fn encode<F: Scalar>(entries: &[(String, Tensor<F>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode<F: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<F>)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadCheckpointHeader);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Checkpoint(format!("{name}: absurd shape {rows}x{cols}")))?;
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| F::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        out.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save<F: Scalar>(path: &Path, entries: &[(String, Tensor<F>)]) -> Result<()> {
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load<F: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<F>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[("w".to_string(), Tensor::<f64>::from_rows(&[[1.5, -2.0]]))]);
        assert_eq!(&bytes[..4], b"RGI1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes[12], b'w');
        assert_eq!(&bytes[13..21], &1u64.to_le_bytes());
        assert_eq!(&bytes[21..29], &2u64.to_le_bytes());
        assert_eq!(&bytes[29..37], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 45);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut bytes = encode(&[("a".to_string(), Tensor::<f64>::zeros(2, 2))]);
        assert!(matches!(decode::<f64>(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        bytes[0] = b'X';
        let err = decode::<f64>(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "bad checkpoint header");
    }

    proptest! {
        #[test]
        fn round_trip(
            mats in prop::collection::vec(
                (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
                    (Just(r), Just(c), prop::collection::vec(-1e6f64..1e6, r * c))
                }),
                0..4,
            )
        ) {
            let entries: Vec<(String, Tensor<f64>)> = mats
                .into_iter()
                .enumerate()
                .map(|(i, (r, c, d))| (format!("p.{i}"), Tensor::from_vec(r, c, d).unwrap()))
                .collect();
            let back = decode::<f64>(&encode(&entries)).unwrap();
            prop_assert_eq!(back, entries);
        }
    }
}
