use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use dsit_tensor::Tensor;

use super::{ModelError, VitModel};

const MAGIC: &[u8; 4] = b"DSCK";
const VERSION: u32 = 1;

/// Serializes every parameter as name, shape and little-endian f64 payload.
pub fn write_checkpoint<W: Write>(model: &VitModel, mut w: W) -> Result<(), ModelError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for p in model.params().iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &dim in shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint into `model`, which must have the same parameter
/// names and shapes in the same order.
pub fn read_checkpoint<R: Read>(model: &mut VitModel, mut r: R) -> Result<(), ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut loaded = Vec::with_capacity(model.params().len());
    loop {
        let mut len = [0u8; 4];
        match r.read(&mut len[..1])? {
            0 => break,
            _ => r.read_exact(&mut len[1..])?,
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| ModelError::Checkpoint("non-utf8 name".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        loaded.push((name, shape, data));
    }
    if loaded.len() != model.params().len() {
        return Err(ModelError::Checkpoint(format!(
            "{} parameters in file, model has {}",
            loaded.len(),
            model.params().len()
        )));
    }
    for ((name, shape, _), p) in loaded.iter().zip(model.params().iter()) {
        if *name != p.name || shape.as_slice() != p.tensor.shape() {
            return Err(ModelError::Checkpoint(format!(
                "parameter {name} {shape:?} does not match {} {:?}",
                p.name,
                p.tensor.shape()
            )));
        }
    }
    for ((_, shape, data), p) in loaded.into_iter().zip(model.params_mut().iter_mut()) {
        p.tensor = Tensor::new(shape, data)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?
            .with_requires_grad(true);
    }
    Ok(())
}

pub fn save_checkpoint(model: &VitModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(model: &mut VitModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    read_checkpoint(model, BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
