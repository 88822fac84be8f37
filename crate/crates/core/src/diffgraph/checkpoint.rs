//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MVGN" | version u32 | count u32 |
//!   count x ( name_len u16 | name utf-8 | rank u8 | extents u64 x rank | f64 x prod(extents) )
//! ```

use std::fs;
use std::path::Path;

use super::{GraphError, ParameterStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVGN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(store: &ParameterStore) -> Result<Vec<u8>, GraphError> {
    let mut out = Vec::with_capacity(12 + store.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| GraphError::Contract("too many parameters".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, p) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| GraphError::Contract(format!("parameter name too long: `{name}`")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(p.value.rank()).map_err(|_| GraphError::Contract(format!("rank too large for `{name}`")))?;
        out.push(rank);
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], GraphError> {
        if self.buf.len() - self.pos < n {
            return Err(GraphError::Format {
                offset: self.pos,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, GraphError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, GraphError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, GraphError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint; every parameter is marked trainable.
pub fn decode(buf: &[u8]) -> Result<ParameterStore, GraphError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(GraphError::Format {
            offset: 0,
            detail: "bad magic, expected \"MVGN\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(GraphError::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("parameter count")?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| GraphError::Format {
            offset: at + 2,
            detail: "parameter name is not utf-8".into(),
        })?;
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| GraphError::Format {
                offset: r.pos,
                detail: format!("extents {shape:?} overflow"),
            })?;
        let bytes = r.take(n * 8, "payload")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store
            .insert(name, Tensor::new(shape, data)?, true)
            .map_err(|_| GraphError::Format {
                offset: at,
                detail: format!("duplicate parameter `{name}`"),
            })?;
    }
    if r.pos != buf.len() {
        return Err(GraphError::Format {
            offset: r.pos,
            detail: "trailing bytes".into(),
        });
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<(), GraphError> {
    let bytes = encode(store)?;
    fs::write(path, bytes).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore, GraphError> {
    let bytes = fs::read(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("b.bias", Tensor::from_vec(vec![0.5, -0.25]), true).unwrap();
        s.insert("a.w", Tensor::new(vec![2, 1, 3], vec![1.0, f64::MIN_POSITIVE, -0.0, 3.5, 1e300, -7.0]).unwrap(), true)
            .unwrap();
        s.insert("scalar", Tensor::scalar(2.0), true).unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample_store()).unwrap();
        assert_eq!(&bytes[..4], b"MVGN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        // First parameter in sorted order is "a.w".
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 3);
        assert_eq!(&bytes[14..17], b"a.w");
        assert_eq!(bytes[17], 3);
        assert_eq!(u64::from_le_bytes(bytes[18..26].try_into().unwrap()), 2);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = encode(&sample_store()).unwrap();
        for cut in [0, 3, 11, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(GraphError::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = decode(&bad).unwrap_err().to_string();
        assert!(err.contains("MVGN"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.mvgn");
        let s = sample_store();
        save_checkpoint(&s, &path).unwrap();
        assert!(load_checkpoint(&path).unwrap().bitwise_eq(&s));
    }

    proptest! {
        #[test]
        fn encode_decode_is_bitwise(values in prop::collection::vec(prop::num::f64::ANY, 0..40), split in 0usize..40) {
            let split = split.min(values.len());
            let mut s = ParameterStore::new();
            s.insert("x.first", Tensor::from_vec(values[..split].to_vec()), true).unwrap();
            s.insert("y.second", Tensor::from_vec(values[split..].to_vec()), true).unwrap();
            let back = decode(&encode(&s).unwrap()).unwrap();
            prop_assert!(back.bitwise_eq(&s));
            prop_assert_eq!(encode(&back).unwrap(), encode(&s).unwrap());
        }
    }
}
