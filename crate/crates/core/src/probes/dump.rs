use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use dsit_tensor::Tensor;

use crate::forge::LabeledImage;
use crate::trainer::extract;
use crate::vit::VitModel;

use super::ProbeError;

const MAGIC: &[u8; 4] = b"DSFD";

/// Class-token features with their class and domain labels, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub features: Tensor,
    pub class_labels: Vec<usize>,
    pub domain_labels: Vec<usize>,
}

impl FeatureDump {
    pub fn new(features: Tensor, class_labels: Vec<usize>, domain_labels: Vec<usize>) -> Result<Self, ProbeError> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] == 0 {
            return Err(ProbeError::InvalidDump(format!("features must be [N×d], got {shape:?}")));
        }
        let n = shape[0];
        for len in [class_labels.len(), domain_labels.len()] {
            if len != n {
                return Err(ProbeError::LengthMismatch(n, len));
            }
        }
        let dump = Self {
            features,
            class_labels,
            domain_labels,
        };
        if let Some(i) = (0..n).find(|&i| dump.row(i).iter().all(|&v| v == 0.0)) {
            return Err(ProbeError::ZeroNormFeature(i));
        }
        Ok(dump)
    }

    pub fn from_rows(
        data: Vec<f64>,
        dim: usize,
        class_labels: Vec<usize>,
        domain_labels: Vec<usize>,
    ) -> Result<Self, ProbeError> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(ProbeError::InvalidDump(format!("{} values do not form rows of {dim}", data.len())));
        }
        let features = Tensor::new(vec![data.len() / dim, dim], data)
            .map_err(|e| ProbeError::InvalidDump(e.to_string()))?;
        Self::new(features, class_labels, domain_labels)
    }

    /// Class-token features of `images`, which must carry both labels.
    pub fn from_model(model: &VitModel, images: &[LabeledImage], batch_size: usize) -> Result<Self, ProbeError> {
        let mut class_labels = Vec::with_capacity(images.len());
        let mut domain_labels = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            match (img.class_label, img.domain_label) {
                (Some(c), Some(d)) => {
                    class_labels.push(c);
                    domain_labels.push(d);
                }
                _ => return Err(ProbeError::InvalidDump(format!("image {i} lacks a class or domain label"))),
            }
        }
        let out = extract(model, images, batch_size)?;
        Self::new(out.z_c, class_labels, domain_labels)
    }

    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.data()[i * d..][..d]
    }

    /// Rows scaled to unit length, flattened.
    pub(crate) fn unit_rows(&self) -> Result<Vec<f64>, ProbeError> {
        let mut out = self.features.data().to_vec();
        for (i, row) in out.chunks_exact_mut(self.dim()).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(ProbeError::ZeroNormFeature(i));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(out)
    }
}

fn label_i32(v: usize) -> Result<i32, ProbeError> {
    i32::try_from(v).map_err(|_| ProbeError::InvalidDump(format!("label {v} exceeds i32")))
}

pub fn write_dump(dump: &FeatureDump, mut w: impl Write) -> Result<(), ProbeError> {
    let n = u32::try_from(dump.len()).map_err(|_| ProbeError::InvalidDump("too many rows".into()))?;
    let d = u32::try_from(dump.dim()).map_err(|_| ProbeError::InvalidDump("feature dim too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&d.to_le_bytes())?;
    for v in dump.features.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    for labels in [&dump.class_labels, &dump.domain_labels] {
        for &l in labels {
            w.write_all(&label_i32(l)?.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], ProbeError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| ProbeError::InvalidDump(format!("truncated: {e}")))?;
    Ok(buf)
}

fn read_labels(r: &mut impl Read, n: usize) -> Result<Vec<usize>, ProbeError> {
    (0..n)
        .map(|_| {
            let v = i32::from_le_bytes(read_array(r)?);
            usize::try_from(v).map_err(|_| ProbeError::InvalidDump(format!("negative label {v}")))
        })
        .collect()
}

pub fn read_dump(mut r: impl Read) -> Result<FeatureDump, ProbeError> {
    if &read_array::<4>(&mut r)? != MAGIC {
        return Err(ProbeError::InvalidDump("bad magic".into()));
    }
    let n = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let d = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let data = (0..n * d)
        .map(|_| Ok(f64::from_le_bytes(read_array(&mut r)?)))
        .collect::<Result<Vec<_>, ProbeError>>()?;
    let class_labels = read_labels(&mut r, n)?;
    let domain_labels = read_labels(&mut r, n)?;
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(ProbeError::InvalidDump("trailing bytes".into()));
    }
    FeatureDump::from_rows(data, d, class_labels, domain_labels)
}

pub fn save_dump(dump: &FeatureDump, path: impl AsRef<Path>) -> Result<(), ProbeError> {
    write_dump(dump, BufWriter::new(File::create(path)?))
}

pub fn load_dump(path: impl AsRef<Path>) -> Result<FeatureDump, ProbeError> {
    read_dump(BufReader::new(File::open(path)?))
}
