use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FeatureDump, ProbeError};

/// Full-batch gradient descent settings for the linear domain probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.1,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainProbe {
    /// Held-out accuracy.
    pub accuracy: f64,
    pub train_accuracy: f64,
}

impl DomainProbe {
    pub fn error(&self) -> f64 {
        1.0 - self.accuracy
    }
}

/// Softmax regression from frozen features to domain labels. Features are
/// standardised with training-split statistics; weights start at zero.
pub fn train_domain_probe(dump: &FeatureDump, cfg: ProbeConfig, seed: u64) -> Result<DomainProbe, ProbeError> {
    let k = dump.domain_labels.iter().max().map_or(0, |m| m + 1);
    let present = (0..k).filter(|c| dump.domain_labels.contains(c)).count();
    if present < 2 {
        return Err(ProbeError::SingleDomain);
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) || !(cfg.lr > 0.0) {
        return Err(ProbeError::InvalidArgument(format!("bad probe config {cfg:?}")));
    }
    let n = dump.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);

    let d = dump.dim();
    let mut mean = vec![0.0; d];
    for &i in train {
        mean.iter_mut().zip(dump.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut std = vec![0.0; d];
    for &i in train {
        std.iter_mut()
            .zip(dump.row(i).iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m).powi(2));
    }
    std.iter_mut().for_each(|s| {
        let sd = (*s / train.len() as f64).sqrt();
        *s = if sd > 1e-12 { sd } else { 1.0 };
    });
    let x: Vec<f64> = (0..n)
        .flat_map(|i| {
            dump.row(i)
                .iter()
                .zip(mean.iter().zip(&std))
                .map(|(v, (m, s))| (v - m) / s)
                .collect::<Vec<_>>()
        })
        .collect();

    let mut weights = vec![0.0; k * d];
    let mut bias = vec![0.0; k];
    let mut probs = vec![0.0; k];
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for &i in train {
            let xi = &x[i * d..][..d];
            logits(&weights, &bias, xi, &mut probs);
            softmax(&mut probs);
            probs[dump.domain_labels[i]] -= 1.0;
            for c in 0..k {
                gb[c] += probs[c];
                gw[c * d..][..d].iter_mut().zip(xi).for_each(|(g, v)| *g += probs[c] * v);
            }
        }
        let scale = cfg.lr / train.len() as f64;
        weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= scale * g);
        bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= scale * g);
    }

    let accuracy_on = |rows: &[usize]| {
        let mut scores = vec![0.0; k];
        let hits = rows
            .iter()
            .filter(|&&i| {
                logits(&weights, &bias, &x[i * d..][..d], &mut scores);
                crate::trainer::argmax(&scores) == dump.domain_labels[i]
            })
            .count();
        hits as f64 / rows.len() as f64
    };
    Ok(DomainProbe {
        accuracy: accuracy_on(test),
        train_accuracy: accuracy_on(train),
    })
}

fn logits(weights: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (c, o) in out.iter_mut().enumerate() {
        *o = bias[c] + weights[c * d..][..d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

fn softmax(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter_mut().for_each(|x| *x = (*x - max).exp());
    let sum: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= sum);
}

/// Proxy A-distance `2(1 − 2ε)` from a probe's held-out error; errors above
/// one half are clamped to one half.
pub fn a_distance(probe_error: f64) -> f64 {
    2.0 * (1.0 - 2.0 * probe_error.clamp(0.0, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn gaussian_dump(n: usize, offset: f64, seed: u64) -> FeatureDump {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let domains: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data = domains
            .iter()
            .flat_map(|&dom| (0..4).map(|_| unit.sample(&mut rng) + offset * dom as f64).collect::<Vec<_>>())
            .collect();
        FeatureDump::from_rows(data, 4, vec![0; n], domains).unwrap()
    }

    #[test]
    fn a_distance_endpoints() {
        assert_eq!(a_distance(0.5), 0.0);
        assert_eq!(a_distance(0.0), 2.0);
        assert_eq!(a_distance(0.25), 1.0);
        assert_eq!(a_distance(0.7), 0.0);
    }

    #[test]
    fn separable_domains_are_found() {
        let probe = train_domain_probe(&gaussian_dump(200, 20.0, 1), ProbeConfig::default(), 0).unwrap();
        assert_eq!(probe.accuracy, 1.0);
    }

    // 1000 held-out points put the chance band at more than 3 standard errors.
    #[test]
    fn identical_domains_sit_at_chance() {
        let probe = train_domain_probe(&gaussian_dump(5000, 0.0, 2), ProbeConfig::default(), 0).unwrap();
        assert!((probe.accuracy - 0.5).abs() <= 0.05, "{}", probe.accuracy);
    }

    #[test]
    fn single_domain_is_rejected() {
        let dump = FeatureDump::from_rows(vec![1.0; 8], 2, vec![0; 4], vec![1; 4]).unwrap();
        assert!(matches!(
            train_domain_probe(&dump, ProbeConfig::default(), 0),
            Err(ProbeError::SingleDomain)
        ));
    }
}
