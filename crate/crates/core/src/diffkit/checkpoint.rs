//! Flat binary parameter checkpoints.
//!
//! ```text
//! "G3DK"  u32 version
//! repeated until EOF:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 rank, rank x u32 extents
//!   product(extents) x f64
//! ```
//! All integers and floats are little-endian.

use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"G3DK";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 1 << 12;
const MAX_RANK: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("invalid record at byte {offset}: {reason}")]
    Record { offset: usize, reason: String },
}

pub fn write_checkpoint(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut entries = Vec::new();
    while r.pos < bytes.len() {
        let offset = r.pos;
        let bad = |reason: String| CheckpointError::Record { offset, reason };
        let name_len = r.u32()? as usize;
        if name_len == 0 || name_len > MAX_NAME {
            return Err(bad(format!("name length {name_len}")));
        }
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad("name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(bad(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = r.u32()? as usize;
            if e == 0 {
                return Err(bad("zero extent".into()));
            }
            numel = numel.checked_mul(e).ok_or_else(|| bad("extent product overflows".into()))?;
            shape.push(e);
        }
        let nbytes = numel.checked_mul(8).ok_or_else(|| bad("extent product overflows".into()))?;
        let raw = r.take(nbytes)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entries.push((name, Tensor::from_parts(shape, data)));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = write_checkpoint(&[("w".into(), Tensor::vector(&[1.5]))]);
        assert_eq!(&bytes[..4], b"G3DK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes[12], b'w');
        assert_eq!(&bytes[13..17], &1u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &1u32.to_le_bytes());
        assert_eq!(&bytes[21..29], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 29);
    }

    #[test]
    fn rejects_corruption() {
        assert_eq!(read_checkpoint(b"NOPE\x01\0\0\0"), Err(CheckpointError::BadMagic));
        assert_eq!(read_checkpoint(b"G3DK\x02\0\0\0"), Err(CheckpointError::Version(2)));
        let mut bytes = write_checkpoint(&[("w".into(), Tensor::vector(&[1.0, 2.0]))]);
        bytes.pop();
        assert!(matches!(read_checkpoint(&bytes), Err(CheckpointError::Truncated(_))));
        // huge extents must fail on length, not allocate
        let mut evil = b"G3DK\x01\0\0\0\x01\0\0\0a\x02\0\0\0".to_vec();
        evil.extend_from_slice(&u32::MAX.to_le_bytes());
        evil.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(read_checkpoint(&evil).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 0..5), seed in any::<u64>()) {
            let entries: Vec<(String, Tensor)> = shapes.iter().enumerate().map(|(i, s)| {
                let t = Tensor::from_fn(s, |j| (seed.wrapping_add(j as u64) as f64).sin() * 1e3);
                (format!("layer{i}.w"), t)
            }).collect();
            let back = read_checkpoint(&write_checkpoint(&entries)).unwrap();
            prop_assert_eq!(back, entries);
        }
    }
}
