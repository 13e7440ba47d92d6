use dsit_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::forge::{default_specs, dri_subset, shuffle_patches, DriBatch, LabeledImage};
use crate::probes::{a_distance, check_criterion, gamma_metrics, FeatureDump, Gamma};
use crate::trainer::{
    assign_pseudo_labels, compute_centroids, div_loss, domain_step, im_loss, task_step_vendor, LabeledBatch,
    OptimState, Routing,
};
use crate::vit::{ParamGroup, VitConfig, VitModel};

/// Outcome of one quick built-in check.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
}

/// Fast invariant checks that need no training run.
pub fn selftest() -> Vec<SelfCheck> {
    let checks: [(&'static str, fn() -> bool); 6] = [
        ("gradient routing", routing),
        ("shuffle invariants", shuffle),
        ("pseudo-label oracle", pseudo_labels),
        ("similarity oracle", gamma),
        ("loss analytics", losses),
        ("A-distance endpoints", endpoints),
    ];
    checks
        .into_iter()
        .map(|(name, f)| SelfCheck {
            name,
            passed: std::panic::catch_unwind(f).unwrap_or(false),
        })
        .collect()
}

fn random_images(n: usize, size: usize, seed: u64) -> Vec<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let data = (0..3 * size * size).map(|_| rng.random::<f64>()).collect();
            LabeledImage::new(Tensor::new(vec![3, size, size], data).unwrap(), Some(i % 2), Some(0)).unwrap()
        })
        .collect()
}

fn routing() -> bool {
    let cfg = VitConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        num_layers: 2,
        num_classes: 2,
        ..VitConfig::default()
    };
    let mut model = VitModel::new(cfg).unwrap();
    let images = random_images(4, 8, 1);
    let specs = default_specs();
    let opt = OptimState::new(0.05);
    let domain_side = [ParamGroup::ThetaQ, ParamGroup::HeadDomain];
    let task_side = [ParamGroup::BackboneRest, ParamGroup::HeadTask];
    let before = model.params().checksum(&task_side);
    for step in 0..10 {
        let samples = dri_subset(&images, &specs, 2, step, &[0, 6, 12, 18]).unwrap();
        let batch = DriBatch::new(&samples, 2).unwrap();
        domain_step(&mut model, &batch, Routing::Split.domain_groups(), &opt).unwrap();
    }
    let domain_ok = model.params().checksum(&task_side) == before;
    let before = model.params().checksum(&domain_side);
    let batch = LabeledBatch::from_images(&images).unwrap();
    for _ in 0..10 {
        task_step_vendor(&mut model, &batch, Routing::Split.task_groups(), &opt).unwrap();
    }
    domain_ok && model.params().checksum(&domain_side) == before
}

fn cells(img: &[f64], size: usize, grid: usize) -> Vec<Vec<u64>> {
    let cell = size / grid;
    let mut out: Vec<Vec<u64>> = (0..grid * grid)
        .map(|c| {
            let (cy, cx) = (c / grid * cell, c % grid * cell);
            (0..cell * cell)
                .map(|i| img[(cy + i / cell) * size + cx + i % cell].to_bits())
                .collect()
        })
        .collect();
    out.sort();
    out
}

fn shuffle() -> bool {
    let img = &random_images(1, 32, 2)[0];
    [1, 2, 4, 8].into_iter().all(|g| {
        let a = shuffle_patches(img, g, 7).unwrap();
        let b = shuffle_patches(img, g, 7).unwrap();
        let plane = |t: &Tensor| t.data()[..32 * 32].to_vec();
        let same_cells = cells(&plane(&a.pixels), 32, g) == cells(&plane(&img.pixels), 32, g);
        let identity = g != 1 || a.pixels == img.pixels;
        same_cells && identity && a.pixels == b.pixels
    })
}

fn pseudo_labels() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..20).all(|_| {
        let (n, k, d) = (rng.random_range(1..30), rng.random_range(2..5), rng.random_range(1..6));
        let feats: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = Tensor::new(vec![n, d], feats.clone()).unwrap();
        let l = Tensor::new(vec![n, k], logits.clone()).unwrap();
        let c = compute_centroids(&f, &l, None).unwrap().centroids;
        let mut ok = true;
        for class in 0..k {
            let mut num = vec![0.0; d];
            let mut den = 0.0;
            for i in 0..n {
                let row = &logits[i * k..][..k];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                let w = row[class].exp() / z;
                den += w;
                (0..d).for_each(|j| num[j] += w * feats[i * d + j]);
            }
            ok &= (0..d).all(|j| (c.data()[class * d + j] - num[j] / den).abs() < 1e-12);
        }
        let Ok(labels) = assign_pseudo_labels(&f, &c) else { return ok };
        ok && labels.iter().enumerate().all(|(i, &y)| {
            let z = &feats[i * d..][..d];
            let cos = |class: usize| {
                let cv = &c_row(&c, class, d);
                let dot: f64 = z.iter().zip(cv).map(|(a, b)| a * b).sum();
                dot / (z.iter().map(|v| v * v).sum::<f64>().sqrt() * cv.iter().map(|v| v * v).sum::<f64>().sqrt())
            };
            (0..k).all(|other| 1.0 - cos(y) <= 1.0 - cos(other))
        })
    })
}

fn c_row(c: &Tensor, row: usize, d: usize) -> Vec<f64> {
    c.data()[row * d..][..d].to_vec()
}

fn gamma() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 24;
    let data: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let classes: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let domains: Vec<usize> = (0..n).map(|i| i / 12).collect();
    let dump = FeatureDump::from_rows(data.clone(), 3, classes.clone(), domains.clone()).unwrap();
    let got = gamma_metrics(&dump).unwrap();
    let cos = |i: usize, j: usize| {
        let (a, b) = (&data[i * 3..][..3], &data[j * 3..][..3]);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|v| v * v).sum::<f64>().sqrt() * b.iter().map(|v| v * v).sum::<f64>().sqrt())
    };
    let mean = |pred: &dyn Fn(usize, usize) -> bool| {
        let pairs: Vec<f64> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| pred(i, j))
            .map(|(i, j)| cos(i, j))
            .collect();
        pairs.iter().sum::<f64>() / pairs.len() as f64
    };
    let want = Gamma {
        cls: mean(&|i, j| classes[i] == classes[j] && domains[i] != domains[j]),
        dom: mean(&|i, j| classes[i] != classes[j] && domains[i] == domains[j]),
        all: mean(&|i, j| classes[i] != classes[j] && domains[i] != domains[j]),
    };
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let verdicts = check_criterion(Gamma { cls: 0.81, dom: 0.78, all: 0.71 }, 0.05).unwrap().disentangled
        && !check_criterion(Gamma { cls: 0.84, dom: 0.74, all: 0.73 }, 0.05).unwrap().disentangled;
    close(got.cls, want.cls) && close(got.dom, want.dom) && close(got.all, want.all) && verdicts
}

fn losses() -> bool {
    let k = 4;
    let tape = Tape::new();
    let uniform = tape.constant(&Tensor::zeros(vec![3, k]));
    let one_hot = tape.constant(&Tensor::new(vec![2, k], vec![800.0, 0.0, 0.0, 0.0, 0.0, 0.0, 800.0, 0.0]).unwrap());
    let im_uniform = im_loss(uniform).unwrap().item().unwrap();
    let im_one_hot = im_loss(one_hot).unwrap().item().unwrap();
    let div_uniform = div_loss(uniform).unwrap().item().unwrap();
    let log_k = (k as f64).ln();
    (im_uniform - log_k).abs() < 1e-9 && im_one_hot.abs() < 1e-9 && (div_uniform + log_k).abs() < 1e-9
}

fn endpoints() -> bool {
    a_distance(0.5) == 0.0 && a_distance(0.0) == 2.0 && a_distance(0.25) == 1.0
}
