//! Binary tensor container used for checkpoints and corpus features.
//!
//! Layout: the 8-byte magic `GRLMTL01`, a 32-bit little-endian tensor count,
//! then per tensor: a 32-bit length-prefixed UTF-8 name, a 32-bit rank,
//! 64-bit extents, and the row-major values as 64-bit little-endian floats.
//! Tensors are written in name order, so identical contents produce
//! byte-identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GRLMTL01";

pub fn save_tensors(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        let len = u32::try_from(bytes.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = u32::try_from(tensor.rank()).expect("rank fits u32");
        w.write_all(&rank.to_le_bytes())?;
        for &extent in tensor.shape() {
            w.write_all(&(extent as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} in {}",
            String::from_utf8_lossy(&magic),
            path.display()
        )));
    }
    let count = read_u32(&mut r, "tensor count")?;
    let mut entries = BTreeMap::new();
    for i in 0..count {
        let ctx = format!("tensor {i}");
        let name_len = read_u32(&mut r, &ctx)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, &ctx)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("{ctx}: name is not UTF-8")))?;
        let rank = read_u32(&mut r, &name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, &name)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            read_exact(&mut r, &mut buf, &name)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        entries.insert(name, tensor);
    }
    // anything after the declared tensors is corruption
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(entries)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated file while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

/// Writes a parameter store; the round-trip is bit-exact.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut entries = BTreeMap::new();
    for (name, tensor) in store.iter() {
        entries.insert(name.clone(), tensor.clone());
    }
    entries.insert(
        "meta.rng_seed".to_string(),
        Tensor::scalar(store.rng_seed as f64),
    );
    save_tensors(path, &entries)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut entries = load_tensors(path)?;
    let seed = entries
        .remove("meta.rng_seed")
        .map(|t| t.scalar_value() as u64)
        .unwrap_or(0);
    let mut store = ParamStore::new(seed);
    for (name, tensor) in entries {
        store.insert(&name, tensor);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::params::component_rng;

    fn sample_store() -> ParamStore {
        let mut rng = component_rng(3, 30);
        let mut store = ParamStore::new(3);
        store.insert(
            "backbone.block1.ff1.weight",
            Tensor::from_vec(&[3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        store.insert("spk1.out.bias", Tensor::from_vec(&[5], vec![0.1; 5]).unwrap());
        store.insert(
            "weird.values",
            Tensor::from_vec(&[2], vec![f64::MIN_POSITIVE, -0.0]).unwrap(),
        );
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(store.bit_identical(&loaded));
        assert_eq!(loaded.rng_seed, 3);
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let store = sample_store();
        save_checkpoint(&store, &a).unwrap();
        save_checkpoint(&store, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC\x00\x00\x00\x00").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("bad magic"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_yields_no_partial_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_store(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        match load_checkpoint(&cut) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_tensor_names_are_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = sample_store();
        store.insert("future.extension.field", Tensor::scalar(42.0));
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.contains("future.extension.field"));
        assert_eq!(
            loaded.get("future.extension.field").unwrap().scalar_value(),
            42.0
        );
    }
}
