//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "HOIGCKPT"
//! version    u32
//! key_len    u32, then key_len bytes of UTF-8 architecture key
//! step       u64      optimizer step count
//! count      u32      number of parameters
//! per parameter:
//!   name_len u32, then name_len bytes of UTF-8 name
//!   ndim     u32, then ndim x u64 extents
//!   data     prod(extents) x f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HOIGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Upper bound on any length field, to reject corrupt files before allocating.
const MAX_LEN: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch_key: String,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
}

pub fn write_checkpoint(w: &mut impl Write, store: &ParamStore, arch_key: &str) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_str(w, arch_key)?;
    w.write_all(&store.step().to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        write_str(w, store.name(id))?;
        let t = store.value(id);
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::data(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::data(format!("truncated checkpoint: {e}")))?;
    String::from_utf8(buf).map_err(|_| Error::data("checkpoint string is not UTF-8"))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let magic: [u8; 8] = read_exact(r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::data("not a checkpoint file"));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let arch_key = read_str(r)?;
    let step = read_u64(r)?;
    let count = read_u32(r)?;
    let mut params = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = read_str(r)?;
        let ndim = read_u32(r)?;
        if ndim == 0 || ndim > 8 {
            return Err(Error::data(format!("{name}: bad rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut numel: u64 = 1;
        for _ in 0..ndim {
            let e = read_u64(r)?;
            numel = numel.saturating_mul(e);
            shape.push(e as usize);
        }
        if numel == 0 || numel > MAX_LEN {
            return Err(Error::data(format!("{name}: bad shape {shape:?}")));
        }
        let data = (0..numel)
            .map(|_| read_exact::<8>(r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(&shape, data).map_err(|e| Error::data(format!("{name}: {e}")))?;
        params.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::data(e.to_string()))? != 0 {
        return Err(Error::data("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint { arch_key, step, params })
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, config: &ModelConfig) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, store, &config.architecture_key()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads parameter values into `store`, which must have been built from a
/// config with the same architecture key.
pub fn load_checkpoint(path: &Path, config: &ModelConfig, store: &mut ParamStore) -> Result<()> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let ck = read_checkpoint(&mut BufReader::new(f))?;
    apply_checkpoint(&ck, config, store)
}

pub fn apply_checkpoint(ck: &Checkpoint, config: &ModelConfig, store: &mut ParamStore) -> Result<()> {
    let key = config.architecture_key();
    if ck.arch_key != key {
        return Err(Error::config(format!(
            "checkpoint architecture `{}` does not match config `{key}`",
            ck.arch_key
        )));
    }
    if ck.params.len() != store.len() {
        return Err(Error::data(format!(
            "checkpoint has {} parameters, model has {}",
            ck.params.len(),
            store.len()
        )));
    }
    for (name, t) in &ck.params {
        let id = store
            .id(name)
            .ok_or_else(|| Error::data(format!("unknown parameter {name}")))?;
        if store.value(id).shape() != t.shape() {
            return Err(Error::data(format!(
                "{name}: shape {:?} vs model {:?}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = t.clone();
    }
    store.set_step(ck.step);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HoiModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let c = ModelConfig::micro();
        let mut a = ParamStore::new();
        HoiModel::new(c.clone(), &mut a, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        a.set_step(17);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &a, &c.architecture_key()).unwrap();
        let ck = read_checkpoint(&mut buf.as_slice()).unwrap();
        let mut b = ParamStore::new();
        HoiModel::new(c.clone(), &mut b, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a.flatten(), b.flatten());
        apply_checkpoint(&ck, &c, &mut b).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        assert_eq!(b.step(), 17);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &b, &c.architecture_key()).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let c = ModelConfig::micro();
        let mut a = ParamStore::new();
        HoiModel::new(c.clone(), &mut a, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &a, &c.architecture_key()).unwrap();
        assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&mut extra.as_slice()).is_err());

        let other = ModelConfig {
            d_entity: 6,
            d_feature: 6,
            ..c.clone()
        };
        let ck = read_checkpoint(&mut buf.as_slice()).unwrap();
        let mut s = ParamStore::new();
        HoiModel::new(other.clone(), &mut s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(apply_checkpoint(&ck, &other, &mut s), Err(Error::Config(_))));
    }
}
