//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian: magic `PRSM`, format version `u32`,
//! tensor count `u64`, then per tensor a `u32` name length, the UTF-8 name,
//! a `u32` rank, `rank` dims as `u64` and the `f64` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"PRSM";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: {what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint into a fresh store. Every tensor is marked
/// trainable; use [`ParamStore::load_values`] to restore into a model.
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let count = r.u64("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
        let payload = r.take(numel * 8, &name)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let value = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        store.register(&name, value, true).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    decode(&fs::read(path)?)
}

/// Loads `path` into `store`, which is left untouched on any error.
pub fn restore(store: &mut ParamStore, path: &Path) -> Result<()> {
    let loaded = load(path)?;
    store.load_values(&loaded).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.register("a.w", Tensor::uniform(&[3, 4], 1.0, &mut rng), true).unwrap();
        s.register("b", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, -0.0]).unwrap(), false).unwrap();
        s.register("émbed", Tensor::uniform(&[2, 2, 2], 1e300, &mut rng), true).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back.len(), s.len());
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"PRSM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
        assert_eq!(&bytes[20..23], b"a.w");
    }

    #[test]
    fn corrupt_magic_leaves_store_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.prsm");
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let mut target = sample();
        let before = encode(&target);
        assert!(matches!(restore(&mut target, &path), Err(Error::Checkpoint(_))));
        assert_eq!(encode(&target), before);
    }

    #[test]
    fn truncation_and_version_are_errors() {
        let bytes = encode(&sample());
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode(&v), Err(Error::Checkpoint(m)) if m.contains("version")));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn save_load_restore() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.prsm");
        let s = sample();
        save(&s, &path).unwrap();
        let mut target = sample();
        for (id, _) in s.iter().collect::<Vec<_>>() {
            target.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        restore(&mut target, &path).unwrap();
        assert_eq!(encode(&target), encode(&s));
        assert!(!target.get(target.id("b").unwrap()).trainable);
    }
}
