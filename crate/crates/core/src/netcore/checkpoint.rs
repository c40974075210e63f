//! Checkpoint file format.
//!
//! All integers are little-endian `u64`:
//!
//! ```text
//! magic (0x4450434B) | version | count
//! count × { name_len | name (UTF-8) | rank | rank × dim | Π dims × f32 (LE) }
//! ```
//!
//! Values are stored as f32. Encoding is a pure function of the tensors, so
//! `encode(decode(bytes)) == bytes` for every valid file free of NaNs, and parameters
//! that are already f32-representable survive `decode(encode(p))` unchanged.

use super::ModelParams;
use ndarray::{ArrayD, IxDyn};
use std::path::Path;

pub const CHECKPOINT_MAGIC: u64 = 0x4450_434B;
pub const CHECKPOINT_VERSION: u64 = 1;
const MAX_RANK: u64 = 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("bad checkpoint magic {0:#x}")]
    Magic(u64),
    #[error("unsupported checkpoint version {0}")]
    Version(u64),
    #[error("malformed checkpoint record {index}: {message}")]
    Record { index: u64, message: String },
    #[error("{0} trailing bytes after last record")]
    Trailing(usize),
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + params.num_scalars() * 4 + params.len() * 64);
    let word = |out: &mut Vec<u8>, v: u64| out.extend_from_slice(&v.to_le_bytes());
    word(&mut out, CHECKPOINT_MAGIC);
    word(&mut out, CHECKPOINT_VERSION);
    word(&mut out, params.len() as u64);
    for (name, t) in params.iter() {
        word(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        word(&mut out, t.ndim() as u64);
        for &d in t.shape() {
            word(&mut out, d as u64);
        }
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(self.pos)),
        }
    }

    fn word(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.word()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Magic(magic));
    }
    let version = r.word()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.word()?;
    let mut params = ModelParams::new();
    for index in 0..count {
        let bad = |message: String| CheckpointError::Record { index, message };
        let name_len = r.word()?;
        if name_len > r.remaining() as u64 {
            return Err(CheckpointError::Truncated(r.pos));
        }
        let name = std::str::from_utf8(r.take(name_len as usize)?)
            .map_err(|e| bad(format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.word()?;
        if rank > MAX_RANK {
            return Err(bad(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut elems: u64 = 1;
        for _ in 0..rank {
            let d = r.word()?;
            elems = elems
                .checked_mul(d)
                .ok_or_else(|| bad("element count overflows".into()))?;
            dims.push(d as usize);
        }
        let nbytes = elems
            .checked_mul(4)
            .filter(|&n| n <= r.remaining() as u64)
            .ok_or(CheckpointError::Truncated(r.pos))?;
        let data: Vec<f64> = r
            .take(nbytes as usize)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| bad(e.to_string()))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(bad(format!("duplicate parameter {name:?}")));
        }
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Trailing(r.remaining()));
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), CheckpointError> {
    crate::fsio::write_atomic(path, &encode_checkpoint(params)).map_err(|source| {
        CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        }
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ModelParams {
        let mut p = ModelParams::new();
        p.insert(
            "a.w",
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.5, 0.125, 3.0, 0.0, -0.0]).unwrap(),
        );
        p.insert(
            "a.b",
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, 0.25, -1.0]).unwrap(),
        );
        p.insert("scalar", ArrayD::from_elem(IxDyn(&[]), 7.0));
        p
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&sample());
        assert_eq!(&bytes[0..8], &CHECKPOINT_MAGIC.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &3u64.to_le_bytes());
        // First record in name order is "a.b".
        assert_eq!(&bytes[24..32], &3u64.to_le_bytes());
        assert_eq!(&bytes[32..35], b"a.b");
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&sample());
        for cut in [0, 7, 23, 30, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode_checkpoint(&extra),
            Err(CheckpointError::Trailing(1))
        ));
        let mut v = bytes.clone();
        v[8] = 2;
        assert!(matches!(
            decode_checkpoint(&v),
            Err(CheckpointError::Version(2))
        ));
    }

    proptest! {
        #[test]
        fn f32_values_round_trip_bit_exactly(vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40), split in 0usize..40) {
            let split = split.min(vals.len());
            let mut p = ModelParams::new();
            p.insert("x", ArrayD::from_shape_vec(IxDyn(&[split]), vals[..split].iter().map(|&v| v as f64).collect()).unwrap());
            p.insert("y", ArrayD::from_shape_vec(IxDyn(&[1, vals.len() - split]), vals[split..].iter().map(|&v| v as f64).collect()).unwrap());
            let bytes = encode_checkpoint(&p);
            let back = decode_checkpoint(&bytes).unwrap();
            for ((_, a), (_, b)) in p.iter().zip(back.iter()) {
                prop_assert_eq!(a.shape(), b.shape());
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            prop_assert_eq!(encode_checkpoint(&back), bytes);
        }
    }
}
