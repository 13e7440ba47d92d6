use dsit::forge::{
    apply_augmentation, build_dri_dataset, default_specs, dri_sample, generate_synthetic, grid_permutation,
    read_dataset, sample_seed, shuffle_patches, write_dataset, LabeledImage, SyntheticParams,
};
use dsit_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRIDS: [usize; 4] = [1, 2, 4, 8];

fn random_image(size: usize, seed: u64) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * size * size).map(|_| rng.random::<f64>()).collect();
    LabeledImage::new(Tensor::new(vec![3, size, size], data).unwrap(), Some(2), Some(0)).unwrap()
}

/// Cells of every channel plane as bit patterns, sorted so only the
/// multiset is compared.
fn sorted_cells(img: &LabeledImage, grid: usize) -> Vec<Vec<u64>> {
    let n = img.size();
    let cell = n / grid;
    let mut out = Vec::new();
    for plane in img.pixels.data().chunks_exact(n * n) {
        for c in 0..grid * grid {
            let (cy, cx) = (c / grid * cell, c % grid * cell);
            out.push(
                (0..cell * cell)
                    .map(|i| plane[(cy + i / cell) * n + cx + i % cell].to_bits())
                    .collect(),
            );
        }
    }
    out.sort();
    out
}

#[test]
fn shuffles_preserve_cell_multisets_on_32px_images() {
    for seed in 0..20 {
        let img = random_image(32, seed);
        for g in GRIDS {
            let out = shuffle_patches(&img, g, seed * 31 + g as u64).unwrap();
            assert_eq!(sorted_cells(&out, g), sorted_cells(&img, g), "grid {g}, seed {seed}");
        }
    }
}

#[test]
fn grid_one_is_pixel_identity() {
    let img = random_image(32, 3);
    for seed in 0..10 {
        assert_eq!(shuffle_patches(&img, 1, seed).unwrap().pixels, img.pixels);
    }
}

#[test]
fn seeded_shuffles_are_bitwise_reproducible() {
    let img = random_image(32, 4);
    for g in GRIDS {
        let a = shuffle_patches(&img, g, 99).unwrap();
        let b = shuffle_patches(&img, g, 99).unwrap();
        assert_eq!(a.pixels.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.pixels.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn shuffled_images_lose_their_class_label() {
    let out = shuffle_patches(&random_image(8, 1), 2, 0).unwrap();
    assert_eq!(out.class_label, None);
    assert_eq!(out.domain_label, Some(0));
}

#[test]
fn indivisible_grids_are_rejected() {
    let img = random_image(32, 0);
    assert!(shuffle_patches(&img, 3, 0).is_err());
    assert!(shuffle_patches(&img, 0, 0).is_err());
}

#[test]
fn dri_dataset_is_image_major_and_matches_single_samples() {
    let data: Vec<LabeledImage> = (0..3).map(|i| random_image(8, i)).collect();
    let specs = default_specs();
    let all = build_dri_dataset(&data, &specs, 2, 5).unwrap();
    assert_eq!(all.len(), data.len() * specs.len());
    for (idx, s) in all.iter().enumerate() {
        assert_eq!(s.domain_label, idx % specs.len());
        assert_eq!(*s, dri_sample(&data, &specs, 2, 5, idx).unwrap());
    }
}

#[test]
fn dri_sample_is_augmentation_then_shuffle() {
    let data = vec![random_image(16, 2)];
    let specs = default_specs();
    for (j, spec) in specs.iter().enumerate() {
        let seed = sample_seed(7, j as u64);
        let augmented = apply_augmentation(&data[0], spec, sample_seed(seed, 1)).unwrap();
        let want = shuffle_patches(&augmented, 4, sample_seed(seed, 2)).unwrap();
        let got = dri_sample(&data, &specs, 4, 7, j).unwrap();
        assert_eq!(got.pixels, want.pixels);
        assert_eq!(got.domain_label, spec.index);
    }
}

#[test]
fn dataset_files_round_trip() {
    let bench = generate_synthetic(&SyntheticParams { n_per_cell: 3, ..SyntheticParams::default() }).unwrap();
    let mut buf = Vec::new();
    write_dataset(&bench.domains[1], bench.num_classes, &mut buf).unwrap();
    let (back, k) = read_dataset(buf.as_slice()).unwrap();
    assert_eq!(k, bench.num_classes);
    assert_eq!(back, bench.domains[1]);
    buf.truncate(buf.len() - 1);
    assert!(read_dataset(buf.as_slice()).is_err());
}

#[test]
fn synthetic_benchmark_is_seeded() {
    let p = SyntheticParams { n_per_cell: 4, ..SyntheticParams::default() };
    let a = generate_synthetic(&p).unwrap();
    assert_eq!(a.domains, generate_synthetic(&p).unwrap().domains);
    let b = generate_synthetic(&SyntheticParams { seed: p.seed + 1, ..p }).unwrap();
    assert_ne!(a.domains, b.domains);
    for (d, images) in a.domains.iter().enumerate() {
        assert_eq!(images.len(), 4 * a.num_classes);
        assert!(images.iter().all(|im| im.domain_label == Some(d)));
        assert!(images.iter().all(|im| im.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutations_are_bijections(grid in 1usize..10, seed in any::<u64>()) {
        let mut p = grid_permutation(grid, seed);
        p.sort();
        prop_assert_eq!(p, (0..grid * grid).collect::<Vec<_>>());
    }

    #[test]
    fn shuffles_preserve_multisets(seed in any::<u64>(), g in prop::sample::select(GRIDS.to_vec())) {
        let img = random_image(16, seed % 1000);
        let out = shuffle_patches(&img, g, seed).unwrap();
        prop_assert_eq!(sorted_cells(&out, g), sorted_cells(&img, g));
    }

    #[test]
    fn augmentations_keep_shape_and_stay_finite(seed in any::<u64>(), j in 0usize..5) {
        let img = random_image(8, seed % 100);
        let out = apply_augmentation(&img, &default_specs()[j], seed).unwrap();
        prop_assert_eq!(out.pixels.shape(), img.pixels.shape());
        prop_assert!(out.pixels.data().iter().all(|v| v.is_finite()));
    }
}
