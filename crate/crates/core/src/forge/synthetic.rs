use dsit_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{clamp_unit, sample_seed, ForgeError, LabeledImage};

/// Parameters of the synthetic benchmark. Class is the position of a bright
/// blob; domain is a global colour, contrast and noise-texture recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub num_classes: usize,
    pub num_true_domains: usize,
    pub n_per_cell: usize,
    pub shift_strength: f64,
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            num_classes: 4,
            num_true_domains: 2,
            n_per_cell: 200,
            shift_strength: 1.0,
            seed: 0,
            image_size: 32,
            channels: 3,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<(), ForgeError> {
        let fail = |m: &str| Err(ForgeError::InvalidParams(m.to_string()));
        if self.num_classes < 2 {
            return fail("need at least 2 classes");
        }
        if self.num_true_domains < 2 {
            return fail("need at least 2 domains");
        }
        if self.n_per_cell == 0 {
            return fail("n_per_cell must be positive");
        }
        if !(self.shift_strength.is_finite() && self.shift_strength >= 0.0) {
            return fail("shift_strength must be finite and non-negative");
        }
        if self.image_size < 8 || self.channels == 0 {
            return fail("images must be at least 8 pixels wide with one channel");
        }
        Ok(())
    }
}

/// Labelled images for every true domain, `domains[d]`. Within a domain
/// samples cycle through the classes, so every prefix is class-balanced.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub domains: Vec<Vec<LabeledImage>>,
    pub num_classes: usize,
}

const BACKGROUND: f64 = 0.3;
const BLOB_AMPLITUDE: f64 = 0.6;
const WHITE_NOISE: f64 = 0.02;
const JITTER: i64 = 2;

/// Global appearance of one true domain.
#[derive(Debug, Clone)]
struct DomainRecipe {
    shift: Vec<f64>,
    contrast: f64,
    texture_amplitude: f64,
    texture_radius: usize,
}

impl DomainRecipe {
    fn new(domain: usize, channels: usize, strength: f64) -> Self {
        if domain == 0 {
            return Self {
                shift: vec![0.0; channels],
                contrast: 1.0,
                texture_amplitude: 0.0,
                texture_radius: 0,
            };
        }
        let theta = 2.4 * domain as f64;
        let shift = (0..channels)
            .map(|c| strength * 0.2 * (theta + c as f64 * 2.0 * std::f64::consts::PI / 3.0).cos())
            .collect();
        Self {
            shift,
            contrast: 1.0 - 0.4 * strength * (1.0 - 0.5f64.powi(domain as i32)),
            texture_amplitude: 0.15 * strength,
            texture_radius: 1 + domain,
        }
    }
}

pub fn generate_synthetic(params: &SyntheticParams) -> Result<SyntheticBenchmark, ForgeError> {
    params.validate()?;
    let k = params.num_classes;
    let per_domain = k * params.n_per_cell;
    let domains = (0..params.num_true_domains)
        .map(|d| {
            let recipe = DomainRecipe::new(d, params.channels, params.shift_strength);
            (0..per_domain)
                .map(|i| {
                    let seed = sample_seed(params.seed, (d * per_domain + i) as u64);
                    render(params, &recipe, i % k, d, seed)
                })
                .collect()
        })
        .collect();
    Ok(SyntheticBenchmark {
        domains,
        num_classes: k,
    })
}

fn render(p: &SyntheticParams, recipe: &DomainRecipe, class: usize, domain: usize, seed: u64) -> LabeledImage {
    let n = p.image_size;
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = 2.0 * std::f64::consts::PI * class as f64 / p.num_classes as f64;
    let jx = rng.random_range(-JITTER..=JITTER) as f64;
    let jy = rng.random_range(-JITTER..=JITTER) as f64;
    let cx = nf / 2.0 + 0.28 * nf * angle.cos() + jx;
    let cy = nf / 2.0 + 0.28 * nf * angle.sin() + jy;
    let sigma = 0.1 * nf;

    let mut base = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let r2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
            base[y * n + x] = BACKGROUND + BLOB_AMPLITUDE * (-r2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let texture = smooth_noise(&mut rng, n, recipe.texture_radius);
    let white = Normal::new(0.0, WHITE_NOISE).expect("positive sigma");
    let mut data = Vec::with_capacity(p.channels * n * n);
    for c in 0..p.channels {
        for (i, &b) in base.iter().enumerate() {
            let v = 0.5 + recipe.contrast * (b - 0.5)
                + recipe.shift[c]
                + recipe.texture_amplitude * texture[i]
                + white.sample(&mut rng);
            data.push(v);
        }
    }
    clamp_unit(&mut data);
    // Stored at single precision so dataset files reload bit-exactly.
    data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    LabeledImage {
        pixels: Tensor::new(vec![p.channels, n, n], data).expect("valid image"),
        class_label: Some(class),
        domain_label: Some(domain),
    }
}

/// Unit-variance noise field, box-smoothed with the given radius.
fn smooth_noise(rng: &mut ChaCha8Rng, n: usize, radius: usize) -> Vec<f64> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<f64> = (0..n * n).map(|_| unit.sample(rng)).collect();
    if radius == 0 {
        return vec![0.0; n * n];
    }
    let r = radius as isize;
    let mut out = vec![0.0; n * n];
    for y in 0..n as isize {
        for x in 0..n as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).rem_euclid(n as isize) as usize;
                    let xx = (x + dx).rem_euclid(n as isize) as usize;
                    acc += raw[yy * n + xx];
                }
            }
            out[y as usize * n + x as usize] = acc;
        }
    }
    let var = out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
    let scale = if var > 0.0 { var.sqrt().recip() } else { 0.0 };
    out.iter_mut().for_each(|v| *v *= scale);
    out
}
