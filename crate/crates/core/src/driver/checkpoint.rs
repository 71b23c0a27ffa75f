//! Binary checkpoint container.
//!
//! Little-endian. Header: magic `OWCL`, version `u32`, entry count `u32`.
//! Each entry: name length `u16`, UTF-8 name, dtype tag `u8`, rank `u8`,
//! `rank` dimensions as `u64`, then the payload. Tag 0 is `f64` data; tag 1
//! is an opaque byte string (rank 1) used for JSON metadata.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"OWCL";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_BYTES: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryValue {
    F64(Tensor),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub value: EntryValue,
}

/// Ordered named entries; order is preserved through a round trip.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointRecord {
    pub entries: Vec<CheckpointEntry>,
}

impl CheckpointRecord {
    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push(CheckpointEntry {
            name: name.into(),
            value: EntryValue::F64(t),
        });
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, b: Vec<u8>) {
        self.entries.push(CheckpointEntry {
            name: name.into(),
            value: EntryValue::Bytes(b),
        });
    }

    pub fn get(&self, name: &str) -> Option<&EntryValue> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(EntryValue::F64(t)) => Ok(t),
            Some(EntryValue::Bytes(_)) => Err(Error::CheckpointEntry {
                name: name.into(),
                reason: "expected a tensor, found bytes".into(),
            }),
            None => Err(Error::CheckpointEntry {
                name: name.into(),
                reason: "missing from checkpoint".into(),
            }),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(EntryValue::Bytes(b)) => Ok(b),
            Some(EntryValue::F64(_)) => Err(Error::CheckpointEntry {
                name: name.into(),
                reason: "expected bytes, found a tensor".into(),
            }),
            None => Err(Error::CheckpointEntry {
                name: name.into(),
                reason: "missing from checkpoint".into(),
            }),
        }
    }
}

pub fn save_checkpoint(record: &CheckpointRecord) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(record.entries.len() as u32).to_le_bytes());
    for e in &record.entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::CheckpointEntry {
            name: e.name.clone(),
            reason: "name longer than 65535 bytes".into(),
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        match &e.value {
            EntryValue::F64(t) => {
                out.push(DTYPE_F64);
                out.push(t.rank() as u8);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            EntryValue::Bytes(b) => {
                out.push(DTYPE_BYTES);
                out.push(1);
                out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                out.extend_from_slice(b);
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                context: "checkpoint",
                offset: self.bytes.len(),
                needed: self.pos.saturating_add(n) - self.bytes.len(),
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<CheckpointRecord> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(Error::BadMagic {
            context: "checkpoint",
            found: magic,
        });
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion {
            context: "checkpoint",
            found: version,
        });
    }
    let count = c.u32()?;
    let mut record = CheckpointRecord::default();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::CheckpointEntry {
                name: "<invalid utf-8>".into(),
                reason: "entry name is not UTF-8".into(),
            })?
            .to_string();
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64()? as usize);
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
            Error::CheckpointEntry {
                name: name.clone(),
                reason: "dimension product overflows".into(),
            }
        })?;
        let value = match dtype {
            DTYPE_F64 => {
                let raw = c.take(numel.checked_mul(8).unwrap_or(usize::MAX))?;
                let data = raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                EntryValue::F64(Tensor::new(&dims, data)?)
            }
            DTYPE_BYTES if rank == 1 => EntryValue::Bytes(c.take(numel)?.to_vec()),
            other => {
                return Err(Error::CheckpointEntry {
                    name,
                    reason: format!("unsupported dtype tag {other} with rank {rank}"),
                })
            }
        };
        record.entries.push(CheckpointEntry { name, value });
    }
    if c.pos != bytes.len() {
        return Err(Error::CheckpointEntry {
            name: "<trailer>".into(),
            reason: format!("{} unexpected bytes after the last entry", bytes.len() - c.pos),
        });
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CheckpointRecord {
        let mut r = CheckpointRecord::default();
        r.push_tensor("a.weight", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, -0.0]).unwrap());
        r.push_tensor("b", Tensor::scalar(7.0));
        r.push_tensor("empty", Tensor::zeros(&[0, 4]));
        r.push_bytes("meta.note", b"{\"k\":1}".to_vec());
        r
    }

    #[test]
    fn round_trip_is_bitwise() {
        let r = sample();
        let bytes = save_checkpoint(&r).unwrap();
        let back = load_checkpoint(&bytes).unwrap();
        assert_eq!(save_checkpoint(&back).unwrap(), bytes);
        let (EntryValue::F64(a), EntryValue::F64(b)) = (&r.entries[0].value, &back.entries[0].value) else {
            panic!("tensor entries expected");
        };
        assert!(a.bit_eq(b));
    }

    #[test]
    fn corrupt_headers_and_truncation() {
        let bytes = save_checkpoint(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(load_checkpoint(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(load_checkpoint(&bad), Err(Error::BadVersion { found: 2, .. })));
        for cut in [3, 11, 20, bytes.len() - 1] {
            assert!(matches!(load_checkpoint(&bytes[..cut]), Err(Error::Truncated { .. })), "{cut}");
        }
        let mut long = bytes;
        long.push(0);
        assert!(load_checkpoint(&long).is_err());
    }
}
