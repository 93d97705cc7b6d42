//! Binary checkpoint layout, all integers little-endian:
//! `"PSNT" | version u32 | count u32 | { name_len u32 | name | rank u32 |
//! dims u64 × rank | data f64 × numel } × count | crc32 u32`.
//! The CRC32 (IEEE) covers every preceding byte.

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PSNT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("CRC mismatch: stored 0x{stored:08x}, computed 0x{computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("invalid tensor name at byte {0}")]
    Name(usize),
    #[error("invalid tensor {name}: {msg}")]
    Tensor { name: String, msg: String },
    #[error("{trailing} unexpected bytes after the last tensor")]
    Trailing { trailing: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn encode(tensors: &[(String, Tensor<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f64>)>, CheckpointError> {
    if bytes.len() < 4 + 4 + 4 + 4 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Name(at))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Truncated(r.pos))?);
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or(CheckpointError::Truncated(r.pos))?;
        let raw = r.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated(r.pos))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_vec(&dims, data).map_err(|e| CheckpointError::Tensor {
            name: name.clone(),
            msg: e.to_string(),
        })?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Trailing {
            trailing: body.len() - r.pos,
        });
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor<f64>)]) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(tensors)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f64>)>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f64>)> {
        vec![
            ("a".into(), Tensor::from_vec(&[2], vec![1.5, -0.0]).unwrap()),
            (
                "b.weight".into(),
                Tensor::from_vec(&[1, 2], vec![f64::MIN_POSITIVE, 1e300]).unwrap(),
            ),
        ]
    }

    #[test]
    fn exact_layout() {
        let t = vec![("w".to_string(), Tensor::from_vec(&[1], vec![2.0]).unwrap())];
        let b = encode(&t);
        let mut want = b"PSNT".to_vec();
        want.extend([1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, b'w', 1, 0, 0, 0]);
        want.extend(1u64.to_le_bytes());
        want.extend(2.0f64.to_le_bytes());
        let crc = crc32fast::hash(&want);
        want.extend(crc.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = sample();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in s.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn every_flipped_byte_is_detected() {
        let b = encode(&sample());
        for i in 0..b.len() {
            let mut c = b.clone();
            c[i] ^= 0x01;
            assert!(decode(&c).is_err(), "flip at {i}");
        }
        assert!(matches!(decode(&b[..b.len() - 1]), Err(CheckpointError::Crc { .. })));
        assert!(matches!(decode(&b[..6]), Err(CheckpointError::Truncated(_))));
    }
}
