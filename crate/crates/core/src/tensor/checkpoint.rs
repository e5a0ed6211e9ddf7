//! Parameter archive: a magic header, a JSON manifest, then one entry per
//! parameter (name, shape, little-endian f64 data). Optimizer state is not
//! stored.

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamGroup, Result, Tensor, TensorError};

const MAGIC: &[u8; 8] = b"HATSCKPT";
const VERSION: u32 = 1;

pub fn write<W: Write>(mut w: W, manifest: &serde_json::Value, group: &ParamGroup) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let m = serde_json::to_vec(manifest).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    w.write_all(&(m.len() as u64).to_le_bytes())?;
    w.write_all(&m)?;
    w.write_all(&(group.len() as u64).to_le_bytes())?;
    for (name, p) in group.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for x in p.value.data() {
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

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read<R: Read>(mut r: R) -> Result<(serde_json::Value, ParamGroup)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("not a parameter archive".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported archive version {version}"
        )));
    }
    let mlen = read_u64(&mut r)? as usize;
    let mut m = vec![0u8; mlen];
    r.read_exact(&mut m)?;
    let manifest = serde_json::from_slice(&m).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    let count = read_u64(&mut r)?;
    let mut group = ParamGroup::new();
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        group.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok((manifest, group))
}

pub fn save(path: &Path, manifest: &serde_json::Value, group: &ParamGroup) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write(&mut w, manifest, group)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(serde_json::Value, ParamGroup)> {
    let f = std::fs::File::open(path)?;
    read(std::io::BufReader::new(f))
}

/// Copies values from `src` into `dst`, requiring identical names and shapes.
pub fn restore_into(dst: &mut ParamGroup, src: &ParamGroup) -> Result<()> {
    if dst.len() != src.len() {
        return Err(TensorError::Checkpoint(format!(
            "archive holds {} parameters, model expects {}",
            src.len(),
            dst.len()
        )));
    }
    for (name, p) in src.iter() {
        dst.set_value(name, p.value.clone())
            .map_err(|e| TensorError::Checkpoint(format!("{name}: {e}")))?;
    }
    Ok(())
}
