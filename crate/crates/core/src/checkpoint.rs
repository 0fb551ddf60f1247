//! Binary checkpoints: magic, format version, config digest, named f32
//! tensors grouped by parameter store. Little-endian throughout.

use crate::error::{CtxError, Result};
use crate::optim::ParamStore;
use crate::potentials::PotentialNets;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CTXCRF01";
pub const FORMAT_VERSION: u32 = 1;

pub fn config_digest(config_text: &str) -> [u8; 32] {
    Sha256::digest(config_text.as_bytes()).into()
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    stores: &[(&str, &ParamStore<T>)],
    config_text: &str,
) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&config_digest(config_text))?;
    f.write_all(&(stores.len() as u32).to_le_bytes())?;
    for (store_name, store) in stores {
        write_str(&mut f, store_name)?;
        let names: Vec<&str> = store.names().collect();
        f.write_all(&(names.len() as u32).to_le_bytes())?;
        for name in names {
            write_str(&mut f, name)?;
            let t = store.value(name).unwrap();
            f.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                f.write_all(&(v.to_f64_val() as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Loads the stores; the digest of `config_text` must match what was saved.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    config_text: &str,
) -> Result<Vec<(String, ParamStore<T>)>> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut f, &mut magic)?;
    if &magic != MAGIC {
        return Err(CtxError::BadMagic);
    }
    let version = read_u32(&mut f)?;
    if version != FORMAT_VERSION {
        return Err(CtxError::UnsupportedVersion(version));
    }
    let mut digest = [0u8; 32];
    read_exact(&mut f, &mut digest)?;
    if digest != config_digest(config_text) {
        return Err(CtxError::DigestMismatch);
    }
    let n_stores = read_u32(&mut f)? as usize;
    let mut stores = Vec::with_capacity(n_stores);
    for _ in 0..n_stores {
        let store_name = read_str(&mut f)?;
        let n_tensors = read_u32(&mut f)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n_tensors {
            let name = read_str(&mut f)?;
            let rank = read_u32(&mut f)? as usize;
            if rank > 8 {
                return Err(CtxError::MalformedCheckpoint(format!("tensor rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut f)? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                read_exact(&mut f, &mut buf)?;
                data.push(T::from_f64(f32::from_le_bytes(buf) as f64));
            }
            store.insert(&name, Tensor::new(dims, data)?)?;
        }
        stores.push((store_name, store));
    }
    Ok(stores)
}

/// All parameter stores of a model, in a fixed order: unary first, then the
/// pairwise relations in declaration order.
pub fn save_nets<T: Scalar>(path: &Path, nets: &PotentialNets<T>, config_text: &str) -> Result<()> {
    let mut stores: Vec<(&str, &ParamStore<T>)> = vec![("unary", &nets.unary_store)];
    for (name, store) in &nets.pairwise_stores {
        stores.push((name, store));
    }
    save_checkpoint(path, &stores, config_text)
}

/// Restores parameters into freshly built nets; the net architecture comes
/// from `nets.config`, the weights from the file.
pub fn load_nets<T: Scalar>(path: &Path, nets: &mut PotentialNets<T>, config_text: &str) -> Result<()> {
    let stores = load_checkpoint::<T>(path, config_text)?;
    let expect = 1 + nets.pairwise_stores.len();
    if stores.len() != expect {
        return Err(CtxError::MalformedCheckpoint(format!(
            "{} stores in file, model has {expect}",
            stores.len()
        )));
    }
    for (i, (name, loaded)) in stores.into_iter().enumerate() {
        let target = if i == 0 {
            if name != "unary" {
                return Err(CtxError::MalformedCheckpoint(format!("store 0 is {name}, not unary")));
            }
            &mut nets.unary_store
        } else {
            let (expect_name, store) = &mut nets.pairwise_stores[i - 1];
            if &name != expect_name {
                return Err(CtxError::MalformedCheckpoint(format!(
                    "store {i} is {name}, expected {expect_name}"
                )));
            }
            store
        };
        let have: Vec<String> = target.names().map(String::from).collect();
        let got: Vec<String> = loaded.names().map(String::from).collect();
        if have != got {
            return Err(CtxError::MalformedCheckpoint(format!(
                "parameter names in store {name} do not match the configured model"
            )));
        }
        for n in &have {
            let src = loaded.value(n).unwrap();
            let dst = target.value_mut(n).unwrap();
            if dst.shape() != src.shape() {
                return Err(CtxError::MalformedCheckpoint(format!(
                    "{n}: shape {:?} in file, model wants {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
    }
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 4096 {
        return Err(CtxError::MalformedCheckpoint(format!("name length {n}")));
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| CtxError::MalformedCheckpoint("non-UTF8 name".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| CtxError::MalformedCheckpoint("truncated file".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(vec![2, 3], (0..6).map(|i| (i as f32).exp()).collect()).unwrap())
            .unwrap();
        s.insert("a.b", Tensor::new(vec![3], vec![0.1, -0.2, f32::MIN_POSITIVE]).unwrap()).unwrap();
        s
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let s = store();
        save_checkpoint(&p, &[("only", &s)], "cfg").unwrap();
        let back = load_checkpoint::<f32>(&p, "cfg").unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, "only");
        for n in ["a.w", "a.b"] {
            let a = s.value(n).unwrap();
            let b = back[0].1.value(n).unwrap();
            assert_eq!(a.shape(), b.shape());
            assert_eq!(
                a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn corrupted_magic() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &[("only", &store())], "cfg").unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p, "cfg"), Err(CtxError::BadMagic)));
    }

    #[test]
    fn version_bump_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &[("only", &store())], "cfg").unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&p, "cfg"),
            Err(CtxError::UnsupportedVersion(v)) if v == FORMAT_VERSION + 1
        ));
    }

    #[test]
    fn digest_mismatch() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &[("only", &store())], "cfg").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p, "other cfg"), Err(CtxError::DigestMismatch)));
    }

    #[test]
    fn truncated_file() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &[("only", &store())], "cfg").unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&p, "cfg"),
            Err(CtxError::MalformedCheckpoint(_))
        ));
    }

    #[test]
    fn nets_roundtrip() {
        use crate::potentials::PotentialNetsConfig;
        let dir = tempdir().unwrap();
        let p = dir.path().join("n.ckpt");
        let cfg = PotentialNetsConfig {
            featmap: crate::featmap::FeatMapConfig {
                in_channels: 1,
                scales: vec![1.0],
                shared_blocks: vec![crate::featmap::BlockConfig {
                    channels: 2,
                    convs: 1,
                    pool_stride: 2,
                }],
                scale_block: crate::featmap::BlockConfig { channels: 2, convs: 1, pool_stride: 1 },
                pool_windows: vec![],
                downsample_factor: 2,
            },
            unary_hidden: vec![3],
            pairwise_hidden: vec![3],
            k: 2,
            ..Default::default()
        };
        let nets = PotentialNets::<f32>::new(cfg.clone(), 1).unwrap();
        save_nets(&p, &nets, "c").unwrap();
        let mut other = PotentialNets::<f32>::new(cfg, 2).unwrap();
        assert_ne!(
            other.unary_store.value("unary.head.fc0.w").unwrap().data(),
            nets.unary_store.value("unary.head.fc0.w").unwrap().data()
        );
        load_nets(&p, &mut other, "c").unwrap();
        assert_eq!(
            other.unary_store.value("unary.head.fc0.w").unwrap().data(),
            nets.unary_store.value("unary.head.fc0.w").unwrap().data()
        );
    }
}
