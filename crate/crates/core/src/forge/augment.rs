use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{clamp_unit, ForgeError, LabeledImage};

/// Global-statistic perturbations that keep the spatial layout intact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentationKind {
    /// Adds a per-channel offset. Params: one offset per channel (cycled).
    ChannelShift,
    /// Raises pixels to a power drawn uniformly from `[lo, hi]`.
    ContrastGamma,
    /// Adds i.i.d. Gaussian noise. Params: `[sigma]`.
    AdditiveNoise,
    /// Box filter with replicated borders. Params: `[radius]`.
    Blur,
    /// Scales the low-frequency DCT band, more for early channels and less
    /// for later ones. Params: `[scale, cutoff]`, where coefficients with
    /// `u + v < cutoff` are affected.
    FrequencyTint,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 5] = [
        AugmentationKind::ChannelShift,
        AugmentationKind::ContrastGamma,
        AugmentationKind::AdditiveNoise,
        AugmentationKind::Blur,
        AugmentationKind::FrequencyTint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentationKind::ChannelShift => "channel_shift",
            AugmentationKind::ContrastGamma => "contrast_gamma",
            AugmentationKind::AdditiveNoise => "additive_noise",
            AugmentationKind::Blur => "blur",
            AugmentationKind::FrequencyTint => "frequency_tint",
        }
    }

    pub fn default_params(self) -> Vec<f64> {
        match self {
            AugmentationKind::ChannelShift => vec![0.15, -0.15, 0.15],
            AugmentationKind::ContrastGamma => vec![0.6, 1.6],
            AugmentationKind::AdditiveNoise => vec![0.05],
            AugmentationKind::Blur => vec![1.0],
            AugmentationKind::FrequencyTint => vec![1.3, 4.0],
        }
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentationKind {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AugmentationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ForgeError::UnknownAugmentation(s.to_string()))
    }
}

/// One simulated domain: an augmentation and the domain label it assigns.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    pub params: Vec<f64>,
    pub index: usize,
}

impl AugmentationSpec {
    pub fn new(kind: AugmentationKind, params: Vec<f64>, index: usize) -> Result<Self, ForgeError> {
        let spec = Self { kind, params, index };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_defaults(kind: AugmentationKind, index: usize) -> Self {
        Self {
            kind,
            params: kind.default_params(),
            index,
        }
    }

    pub fn validate(&self) -> Result<(), ForgeError> {
        let p = &self.params;
        let bad = |expected| ForgeError::BadAugmentationParams {
            kind: self.kind.name(),
            expected,
            got: p.len(),
        };
        let ok = match self.kind {
            AugmentationKind::ChannelShift => !p.is_empty(),
            AugmentationKind::ContrastGamma => p.len() == 2 && p[0] > 0.0 && p[0] <= p[1],
            AugmentationKind::AdditiveNoise => p.len() == 1 && p[0] >= 0.0,
            AugmentationKind::Blur => p.len() == 1 && p[0] >= 0.0 && p[0].fract() == 0.0,
            AugmentationKind::FrequencyTint => p.len() == 2 && p[0] > 0.0 && p[1] >= 0.0,
        };
        if ok && p.iter().all(|v| v.is_finite()) {
            return Ok(());
        }
        Err(bad(match self.kind {
            AugmentationKind::ChannelShift => "at least one channel offset",
            AugmentationKind::ContrastGamma => "0 < lo <= hi",
            AugmentationKind::AdditiveNoise => "sigma >= 0",
            AugmentationKind::Blur => "integer radius >= 0",
            AugmentationKind::FrequencyTint => "scale > 0 and cutoff >= 0",
        }))
    }
}

/// The five augmentations with default parameters, labelled 0 to 4.
pub fn default_specs() -> Vec<AugmentationSpec> {
    AugmentationKind::ALL
        .into_iter()
        .enumerate()
        .map(|(i, k)| AugmentationSpec::with_defaults(k, i))
        .collect()
}

/// Applies `spec` to `img`; the result carries `spec.index` as its domain
/// label and keeps the class label.
pub fn apply_augmentation(
    img: &LabeledImage,
    spec: &AugmentationSpec,
    rng_seed: u64,
) -> Result<LabeledImage, ForgeError> {
    spec.validate()?;
    let (c, n) = (img.channels(), img.size());
    let mut px = img.pixels.clone();
    let data = px.data_mut();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let p = &spec.params;
    match spec.kind {
        AugmentationKind::ChannelShift => {
            for (ch, plane) in data.chunks_exact_mut(n * n).enumerate() {
                let shift = p[ch % p.len()];
                plane.iter_mut().for_each(|v| *v += shift);
            }
        }
        AugmentationKind::ContrastGamma => {
            let gamma = if p[0] == p[1] { p[0] } else { rng.random_range(p[0]..p[1]) };
            data.iter_mut().for_each(|v| *v = v.max(0.0).powf(gamma));
        }
        AugmentationKind::AdditiveNoise => {
            if p[0] > 0.0 {
                let noise = Normal::new(0.0, p[0]).expect("sigma checked");
                data.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
        }
        AugmentationKind::Blur => {
            let r = p[0] as usize;
            for plane in data.chunks_exact_mut(n * n) {
                box_blur(plane, n, r);
            }
        }
        AugmentationKind::FrequencyTint => {
            let basis = dct_basis(n);
            let cutoff = p[1];
            for (ch, plane) in data.chunks_exact_mut(n * n).enumerate() {
                let weight = if c > 1 { 1.0 - 2.0 * ch as f64 / (c - 1) as f64 } else { 1.0 };
                let scale = p[0].powf(weight);
                let mut coef = dct2(plane, &basis, n, false);
                for u in 0..n {
                    for v in 0..n {
                        if ((u + v) as f64) < cutoff {
                            coef[u * n + v] *= scale;
                        }
                    }
                }
                plane.copy_from_slice(&dct2(&coef, &basis, n, true));
            }
        }
    }
    clamp_unit(data);
    Ok(LabeledImage {
        pixels: px,
        class_label: img.class_label,
        domain_label: Some(spec.index),
    })
}

fn box_blur(plane: &mut [f64], n: usize, r: usize) {
    if r == 0 {
        return;
    }
    let src = plane.to_vec();
    let k = (2 * r + 1) as f64;
    let at = |y: isize, x: isize| {
        let cy = y.clamp(0, n as isize - 1) as usize;
        let cx = x.clamp(0, n as isize - 1) as usize;
        src[cy * n + cx]
    };
    let r = r as isize;
    for y in 0..n as isize {
        for x in 0..n as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    acc += at(y + dy, x + dx);
                }
            }
            plane[y as usize * n + x as usize] = acc / (k * k);
        }
    }
}

/// Orthonormal DCT-II basis, `basis[u * n + x]`.
fn dct_basis(n: usize) -> Vec<f64> {
    let mut b = vec![0.0; n * n];
    for u in 0..n {
        let a = if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for x in 0..n {
            b[u * n + x] = a * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64).cos();
        }
    }
    b
}

/// Separable 2-D DCT (or its inverse) of an `n×n` plane.
fn dct2(plane: &[f64], basis: &[f64], n: usize, inverse: bool) -> Vec<f64> {
    let m = |i: usize, j: usize| if inverse { basis[j * n + i] } else { basis[i * n + j] };
    let mut tmp = vec![0.0; n * n];
    for u in 0..n {
        for x in 0..n {
            tmp[u * n + x] = (0..n).map(|y| m(u, y) * plane[y * n + x]).sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            out[u * n + v] = (0..n).map(|x| tmp[u * n + x] * m(v, x)).sum();
        }
    }
    out
}
