use dsit::probes::{
    a_distance, check_criterion, gamma_metrics, kmeans, nmi, read_dump, train_domain_probe, write_dump, FeatureDump,
    Gamma, ProbeConfig, DEFAULT_TAU,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-12;

fn random_dump(n: usize, d: usize, classes: usize, domains: usize, seed: u64) -> FeatureDump {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cls = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let dom = (0..n).map(|_| rng.random_range(0..domains)).collect();
    FeatureDump::from_rows(data, d, cls, dom).unwrap()
}

/// All-pairs cosine means written independently of the library.
fn brute_gamma(dump: &FeatureDump) -> Option<Gamma> {
    let n = dump.len();
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (dump.row(i), dump.row(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let same_c = dump.class_labels[i] == dump.class_labels[j];
            let same_d = dump.domain_labels[i] == dump.domain_labels[j];
            let slot = match (same_c, same_d) {
                (true, false) => 0,
                (false, true) => 1,
                (false, false) => 2,
                (true, true) => continue,
            };
            sums[slot] += dot / (na * nb);
            counts[slot] += 1;
        }
    }
    if counts.contains(&0) {
        return None;
    }
    Some(Gamma {
        cls: sums[0] / counts[0] as f64,
        dom: sums[1] / counts[1] as f64,
        all: sums[2] / counts[2] as f64,
    })
}

#[test]
fn gamma_matches_all_pairs_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for case in 0..200 {
        let n = rng.random_range(2..=40);
        let dump = random_dump(n, rng.random_range(1..=8), 3, 2, case);
        match (brute_gamma(&dump), gamma_metrics(&dump)) {
            (Some(want), Ok(got)) => {
                assert!((want.cls - got.cls).abs() < ORACLE_TOL);
                assert!((want.dom - got.dom).abs() < ORACLE_TOL);
                assert!((want.all - got.all).abs() < ORACLE_TOL);
                checked += 1;
            }
            (None, Err(_)) => {}
            (want, got) => panic!("case {case}: oracle {want:?}, library {got:?}"),
        }
    }
    assert!(checked > 150);
}

#[test]
fn reference_table_values_classify_as_expected() {
    assert!(check_criterion(Gamma { cls: 0.81, dom: 0.78, all: 0.71 }, DEFAULT_TAU).unwrap().disentangled);
    assert!(!check_criterion(Gamma { cls: 0.84, dom: 0.74, all: 0.73 }, DEFAULT_TAU).unwrap().disentangled);
}

#[test]
fn a_distance_endpoints_are_exact() {
    assert_eq!(a_distance(0.5), 0.0);
    assert_eq!(a_distance(0.0), 2.0);
    assert_eq!(a_distance(0.25), 1.0);
}

#[test]
fn probe_separates_shifted_domains() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 400;
    let mut rows = Vec::new();
    let mut dom = Vec::new();
    for i in 0..n {
        let d = i % 2;
        rows.extend((0..4).map(|j| rng.random_range(-1.0..1.0) + if j == 0 { 3.0 * d as f64 } else { 0.0 }));
        dom.push(d);
    }
    let shifted = FeatureDump::from_rows(rows.clone(), 4, vec![0; n], dom.clone()).unwrap();
    let probe = train_domain_probe(&shifted, ProbeConfig::default(), 0).unwrap();
    assert!(probe.accuracy > 0.95);
    assert!(a_distance(probe.error()) > 1.8);
}

#[test]
fn dump_round_trips_through_bytes() {
    let dump = random_dump(17, 5, 3, 2, 1);
    let mut buf = Vec::new();
    write_dump(&dump, &mut buf).unwrap();
    let back = read_dump(buf.as_slice()).unwrap();
    assert_eq!(back.features, dump.features);
    assert_eq!(back.class_labels, dump.class_labels);
    assert_eq!(back.domain_labels, dump.domain_labels);
    buf.pop();
    assert!(read_dump(buf.as_slice()).is_err());
}

#[test]
fn kmeans_recovers_well_separated_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let centers = [[5.0, 0.0], [-5.0, 0.0], [0.0, 5.0]];
    let mut data = Vec::new();
    let mut truth = Vec::new();
    for i in 0..90 {
        let c = i % 3;
        data.extend(centers[c].iter().map(|v| v + rng.random_range(-0.5..0.5)));
        truth.push(c);
    }
    let fit = kmeans(&data, 2, 3, 20, 0).unwrap();
    assert!((nmi(&fit.assignments, &truth).unwrap() - 1.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gamma_ignores_row_scale_and_order(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let dump = random_dump(24, 4, 2, 2, seed);
        prop_assume!(gamma_metrics(&dump).is_ok());
        let base = gamma_metrics(&dump).unwrap();
        let n = dump.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<f64> = order
            .iter()
            .flat_map(|&i| {
                let s = scale * rng.random_range(0.5..2.0);
                dump.row(i).iter().map(move |v| v * s).collect::<Vec<_>>()
            })
            .collect();
        let cls = order.iter().map(|&i| dump.class_labels[i]).collect();
        let dom = order.iter().map(|&i| dump.domain_labels[i]).collect();
        let moved = gamma_metrics(&FeatureDump::from_rows(rows, 4, cls, dom).unwrap()).unwrap();
        prop_assert!((base.cls - moved.cls).abs() < 1e-9);
        prop_assert!((base.dom - moved.dom).abs() < 1e-9);
        prop_assert!((base.all - moved.all).abs() < 1e-9);
    }

    #[test]
    fn nmi_is_symmetric_and_bounded(seed in 0u64..10_000, n in 2usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let ab = nmi(&a, &b).unwrap();
        prop_assert!((ab - nmi(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn nmi_ignores_label_renaming(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<usize> = (0..40).map(|_| rng.random_range(0..4)).collect();
        let renamed: Vec<usize> = a.iter().map(|&v| (v + 1) % 4 + 10).collect();
        prop_assume!(a.iter().any(|&v| v != a[0]));
        prop_assert!((nmi(&a, &renamed).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn a_distance_decreases_with_error(e1 in 0.0f64..0.5, e2 in 0.0f64..0.5) {
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(a_distance(lo) >= a_distance(hi));
        prop_assert!((0.0..=2.0).contains(&a_distance(e1)));
    }

    #[test]
    fn criterion_requires_all_three_conditions(cls in 0.0f64..1.0, dom in 0.0f64..1.0, all in 0.0f64..1.0) {
        let r = check_criterion(Gamma { cls, dom, all }, DEFAULT_TAU).unwrap();
        let want = (cls - dom).abs() < DEFAULT_TAU && cls > all && dom > all;
        prop_assert_eq!(r.disentangled, want);
    }
}
