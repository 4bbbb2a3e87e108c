//! Checkpoint file format, version 1. All integers little-endian.
//!
//! ```text
//! magic      8 bytes  "ICAWCKPT"
//! version    u32
//! cfg_len    u32      length of the model config as compact JSON
//! cfg        cfg_len bytes
//! n_tensors  u32
//! per tensor:
//!   name_len u16, name (UTF-8), ndim u8, dims u32 × ndim, data f64 × Π dims
//! ```
//!
//! Tensors appear in layout order. Identical parameters give identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ICAWCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(p: &ModelParams, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(p.config())?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    let specs = p.layout().specs();
    w.write_all(&(specs.len() as u32).to_le_bytes())?;
    for s in specs {
        w.write_all(&(s.name.len() as u16).to_le_bytes())?;
        w.write_all(s.name.as_bytes())?;
        w.write_all(&[s.shape.len() as u8])?;
        for &dim in &s.shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for x in &p.data()[s.range()] {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; n];
    r.read_exact(&mut cfg)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg)?;
    let mut p = ModelParams::zeros(&cfg)?;
    let specs = p.layout().specs().to_vec();
    let count = read_u32(&mut r)? as usize;
    if count != specs.len() {
        return Err(bad(format!("expected {} tensors, found {count}", specs.len())));
    }
    for s in specs {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let mut nd = [0u8; 1];
        r.read_exact(&mut nd)?;
        let shape = (0..nd[0]).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != s.name || shape != s.shape {
            return Err(bad(format!(
                "tensor {name} {shape:?} does not match layout entry {} {:?}",
                s.name, s.shape
            )));
        }
        let dst = &mut p.data_mut()[s.range()];
        let mut b8 = [0u8; 8];
        for x in dst.iter_mut() {
            r.read_exact(&mut b8)?;
            *x = f64::from_le_bytes(b8);
        }
    }
    Ok(p)
}

pub fn save_checkpoint(p: &ModelParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(p, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
