//! Versioned binary checkpoints: every parameter tensor keyed by name, the
//! config hash, and (optionally) optimizer state so `--resume` restores a
//! run exactly.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::autograd::{Adam, Arr, ParamStore};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"HPCKPT01";

pub struct Checkpoint {
    pub config_hash: u64,
    pub params: Vec<(String, Arr)>,
    pub optimizer: Option<OptimizerState>,
}

pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Arr>,
    pub v: Vec<Arr>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_arr(w: &mut impl Write, a: &Arr) -> Result<()> {
    write_u32(w, a.ndim() as u32)?;
    for &d in a.shape() {
        write_u32(w, d as u32)?;
    }
    for &x in a.as_slice().expect("standard layout") {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_arr(r: &mut impl Read) -> Result<Arr> {
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = vec![0f64; len];
    let mut buf = [0u8; 8];
    for x in &mut data {
        r.read_exact(&mut buf)?;
        *x = f64::from_le_bytes(buf);
    }
    Arr::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
}

pub fn save(
    path: &Path,
    store: &ParamStore,
    config_hash: u64,
    optimizer: Option<&Adam>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u64(&mut w, config_hash)?;
    write_u32(&mut w, store.len() as u32)?;
    for (_, name, arr) in store.iter() {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_arr(&mut w, arr)?;
    }
    match optimizer {
        Some(adam) => {
            w.write_all(&[1u8])?;
            let (t, m, v) = adam.state();
            write_u64(&mut w, t)?;
            for arr in m.iter().chain(v.iter()) {
                write_arr(&mut w, arr)?;
            }
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic / unsupported version".into()));
    }
    let config_hash = read_u64(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("bad name".into()))?;
        params.push((name, read_arr(&mut r)?));
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let optimizer = if flag[0] == 1 {
        let step = read_u64(&mut r)?;
        let mut m = Vec::with_capacity(count);
        for _ in 0..count {
            m.push(read_arr(&mut r)?);
        }
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            v.push(read_arr(&mut r)?);
        }
        Some(OptimizerState { step, m, v })
    } else {
        None
    };
    Ok(Checkpoint {
        config_hash,
        params,
        optimizer,
    })
}

/// Copy loaded tensors into an existing store; names and shapes must match
/// exactly.
pub fn apply(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: checkpoint {} vs model {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for (name, arr) in &ckpt.params {
        let id = store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if store.get(id).shape() != arr.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                arr.shape(),
                store.get(id).shape()
            )));
        }
        store.set(id, arr.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.add("a.w", crate::autograd::uniform_init(&mut rng, &[3, 4], 1.0));
        store.add("a.b", crate::autograd::uniform_init(&mut rng, &[4], 1.0));
        let adam = Adam::new(&store, 1e-3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        save(&path, &store, 0xdeadbeef, Some(&adam)).unwrap();
        let ckpt = load(&path).unwrap();
        assert_eq!(ckpt.config_hash, 0xdeadbeef);
        assert_eq!(ckpt.params.len(), 2);
        let mut store2 = ParamStore::new();
        store2.add("a.w", Arr::zeros(IxDyn(&[3, 4])));
        store2.add("a.b", Arr::zeros(IxDyn(&[4])));
        apply(&mut store2, &ckpt).unwrap();
        for (id, _, arr) in store.iter() {
            let restored = store2.get(id);
            assert_eq!(
                arr.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                restored.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
        assert!(ckpt.optimizer.is_some());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Arr::zeros(IxDyn(&[2, 2])));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        save(&path, &store, 1, None).unwrap();
        let ckpt = load(&path).unwrap();
        let mut other = ParamStore::new();
        other.add("w", Arr::zeros(IxDyn(&[2, 3])));
        assert!(apply(&mut other, &ckpt).is_err());
    }
}
