use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use dsit_tensor::Tensor;

use super::{ForgeError, LabeledImage};

const MAGIC: &[u8; 4] = b"DSIT";
const VERSION: u32 = 1;

/// Writes images as single-precision pixels with `-1` for absent labels.
pub fn write_dataset<W: Write>(images: &[LabeledImage], num_classes: usize, mut w: W) -> Result<(), ForgeError> {
    let first = images.first().ok_or(ForgeError::EmptyDataset)?;
    let shape = first.pixels.shape().to_vec();
    w.write_all(MAGIC)?;
    for v in [VERSION, images.len() as u32, shape[0] as u32, shape[1] as u32, shape[2] as u32, num_classes as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for img in images {
        if img.pixels.shape() != shape {
            return Err(ForgeError::BadImage(img.pixels.shape().to_vec()));
        }
        let label = |l: Option<usize>| l.map_or(-1, |v| v as i32);
        w.write_all(&label(img.class_label).to_le_bytes())?;
        w.write_all(&label(img.domain_label).to_le_bytes())?;
        for &v in img.pixels.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset, returning the images and the class count.
pub fn read_dataset<R: Read>(mut r: R) -> Result<(Vec<LabeledImage>, usize), ForgeError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ForgeError::Format("bad magic".into()));
    }
    let mut header = [0u32; 6];
    for h in &mut header {
        *h = read_u32(&mut r)?;
    }
    let [version, n, c, h, w, k] = header.map(|v| v as usize);
    if version != VERSION as usize {
        return Err(ForgeError::Format(format!("unsupported version {version}")));
    }
    if c == 0 || h == 0 || h != w {
        return Err(ForgeError::Format(format!("bad image shape {c}x{h}x{w}")));
    }
    let numel = c * h * w;
    let mut buf = vec![0u8; numel * 4];
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let class = read_label(&mut r, Some(k))?;
        let domain = read_label(&mut r, None)?;
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let pixels = Tensor::new(vec![c, h, w], data).map_err(|e| ForgeError::Format(e.to_string()))?;
        images.push(LabeledImage::new(pixels, class, domain)?);
    }
    Ok((images, k))
}

pub fn save_dataset(images: &[LabeledImage], num_classes: usize, path: impl AsRef<Path>) -> Result<(), ForgeError> {
    write_dataset(images, num_classes, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Vec<LabeledImage>, usize), ForgeError> {
    read_dataset(BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ForgeError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_label<R: Read>(r: &mut R, bound: Option<usize>) -> Result<Option<usize>, ForgeError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    match i32::from_le_bytes(b) {
        -1 => Ok(None),
        v if v >= 0 && bound.is_none_or(|k| (v as usize) < k) => Ok(Some(v as usize)),
        v => Err(ForgeError::Format(format!("label {v} out of range"))),
    }
}
