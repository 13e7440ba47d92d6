use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::forge::sample_seed;

use super::ProbeError;

const MAX_ITERS: usize = 100;

/// Normalised mutual information, with the mutual information divided by
/// the arithmetic mean of the two entropies. Returns 0 when both
/// partitions are a single block.
pub fn nmi(assignments: &[usize], labels: &[usize]) -> Result<f64, ProbeError> {
    if assignments.len() != labels.len() {
        return Err(ProbeError::LengthMismatch(assignments.len(), labels.len()));
    }
    let n = labels.len();
    if n < 2 {
        return Err(ProbeError::InvalidArgument(format!("nmi needs at least 2 samples, got {n}")));
    }
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut a_counts: HashMap<usize, usize> = HashMap::new();
    let mut b_counts: HashMap<usize, usize> = HashMap::new();
    for (&a, &b) in assignments.iter().zip(labels) {
        *joint.entry((a, b)).or_default() += 1;
        *a_counts.entry(a).or_default() += 1;
        *b_counts.entry(b).or_default() += 1;
    }
    let nf = n as f64;
    let entropy = |counts: &HashMap<usize, usize>| {
        -counts
            .values()
            .map(|&c| {
                let p = c as f64 / nf;
                p * p.ln()
            })
            .sum::<f64>()
    };
    let (ha, hb) = (entropy(&a_counts), entropy(&b_counts));
    let denom = 0.5 * (ha + hb);
    if denom <= 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(a, b), &c)| {
            let pab = c as f64 / nf;
            let pa = a_counts[&a] as f64 / nf;
            let pb = b_counts[&b] as f64 / nf;
            pab * (pab / (pa * pb)).ln()
        })
        .sum();
    Ok((mi / denom).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<f64>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; the lowest-inertia result over
/// `restarts` seeded runs. `data` holds `n` rows of `dim` values.
pub fn kmeans(data: &[f64], dim: usize, k: usize, restarts: usize, seed: u64) -> Result<KMeans, ProbeError> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(ProbeError::InvalidArgument(format!("{} values do not form rows of {dim}", data.len())));
    }
    let n = data.len() / dim;
    if k == 0 || k > n || restarts == 0 {
        return Err(ProbeError::InvalidArgument(format!("k-means with k={k}, n={n}, restarts={restarts}")));
    }
    let mut best: Option<KMeans> = None;
    for r in 0..restarts {
        let run = lloyd(data, dim, k, sample_seed(seed, r as u64));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(data: &[f64], dim: usize, k: usize, seed: u64) -> KMeans {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..][..dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            nearest
                .iter()
                .position(|&w| {
                    target -= w;
                    target < 0.0
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        nearest.iter_mut().enumerate().for_each(|(i, d)| *d = d.min(sq_dist(row(i), &c)));
        centroids.extend_from_slice(&c);
    }

    let mut assignments = vec![0; n];
    for iter in 0..MAX_ITERS {
        let mut changed = false;
        for (i, a) in assignments.iter_mut().enumerate() {
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(row(i), &centroids[c * dim..][..dim]);
                if d < best.1 {
                    best = (c, d);
                }
            }
            changed |= *a != best.0;
            *a = best.0;
        }
        if !changed && iter > 0 {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            sums[a * dim..][..dim].iter_mut().zip(row(i)).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            // An emptied cluster keeps its previous centroid.
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..][..dim].iter_mut().zip(&sums[c * dim..][..dim]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    let inertia = assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(row(i), &centroids[a * dim..][..dim]))
        .sum();
    KMeans {
        assignments,
        centroids,
        inertia,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmi_perfect_and_degenerate() {
        let labels = [0, 0, 1, 1, 2, 2];
        assert!((nmi(&[2, 2, 0, 0, 1, 1], &labels).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[3; 6], &labels).unwrap(), 0.0);
        assert_eq!(nmi(&[0; 4], &[1; 4]).unwrap(), 0.0);
        assert!(matches!(nmi(&[0, 1], &[0]), Err(ProbeError::LengthMismatch(2, 1))));
    }

    #[test]
    fn kmeans_separates_clear_clusters() {
        let data = [0.0, 0.1, 0.2, 10.0, 10.1, 10.2, -10.0, -10.1];
        let km = kmeans(&data, 1, 3, 5, 0).unwrap();
        let a = &km.assignments;
        assert_eq!(a[0], a[1]);
        assert_eq!(a[1], a[2]);
        assert_eq!(a[3], a[4]);
        assert_eq!(a[6], a[7]);
        assert!(a[0] != a[3] && a[0] != a[6] && a[3] != a[6]);
        assert_eq!(km, kmeans(&data, 1, 3, 5, 0).unwrap());
    }
}
