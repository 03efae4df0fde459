//! Self-describing parameter blob.
//!
//! Layout (little-endian): `"SGNN"`, `u32` version, `u32` header length,
//! UTF-8 header text, then until end of input one record per tensor:
//! `u32` name length, name bytes, `u32` rows, `u32` cols, `rows·cols` `f64`
//! in row-major order.

use std::path::Path;

use super::mat::Mat;
use crate::error::{Error, Result};
use crate::io::{usize_to_u32, ByteReader, ByteWriter};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGNN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(usize_to_u32(self.header.len(), "header length")?);
        w.bytes(self.header.as_bytes());
        for (name, m) in &self.tensors {
            w.u32(usize_to_u32(name.len(), "name length")?);
            w.bytes(name.as_bytes());
            w.u32(usize_to_u32(m.rows(), "rows")?);
            w.u32(usize_to_u32(m.cols(), "cols")?);
            w.f64s(m.data());
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "bad magic, expected SGNN".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return r.error(format!("unsupported checkpoint version {version}"));
        }
        let header_len = r.u32("header length")? as usize;
        let header_start = r.offset();
        let header = std::str::from_utf8(r.take(header_len, "header")?)
            .map_err(|e| Error::Parse {
                offset: header_start + e.valid_up_to(),
                message: "header is not UTF-8".into(),
            })?
            .to_string();
        let mut tensors = Vec::new();
        while !r.is_empty() {
            let name_len = r.u32("name length")? as usize;
            let name_start = r.offset();
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|e| Error::Parse {
                    offset: name_start + e.valid_up_to(),
                    message: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let Some(count) = rows.checked_mul(cols) else {
                return r.error("tensor size overflows");
            };
            let payload_start = r.offset();
            let data = r.f64s(count, "tensor payload")?;
            let m = Mat::from_vec(rows, cols, data).map_err(|e| Error::Parse {
                offset: payload_start,
                message: format!("tensor {name}: {e}"),
            })?;
            tensors.push((name, m));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            header: "variant=sgnn\n".into(),
            tensors: vec![
                (
                    "a.weight".into(),
                    Mat::from_vec(2, 2, vec![1.0, -2.0, 3.5, 0.25]).unwrap(),
                ),
                ("a.bias".into(), Mat::zeros(1, 3)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SGNN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [2, 6, 10, bytes.len() - 3] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
