use dsit_tensor::kernels::{dot, norm, softmax_into};
use dsit_tensor::Tensor;

use super::TrainError;

/// Soft total weight below which a class is treated as empty.
pub const DEGENERATE_WEIGHT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    /// `[K × d]`.
    pub centroids: Tensor,
    /// Classes whose soft weight fell below [`DEGENERATE_WEIGHT`].
    pub degenerate: Vec<bool>,
}

/// Softmax-weighted class means of `features` (`[N × d]`) under
/// `task_logits` (`[N × K]`). An empty class keeps its centroid from
/// `previous`, or the global feature mean when there is none.
pub fn compute_centroids(
    features: &Tensor,
    task_logits: &Tensor,
    previous: Option<&Tensor>,
) -> Result<Centroids, TrainError> {
    let (n, d) = dims(features)?;
    let (nl, k) = dims(task_logits)?;
    if n != nl {
        return Err(TrainError::InvalidSchedule(format!("{n} features but {nl} logit rows")));
    }
    if let Some(p) = previous {
        if p.shape() != [k, d] {
            return Err(TrainError::InvalidSchedule(format!("previous centroids {:?}", p.shape())));
        }
    }
    let mut sums = vec![0.0; k * d];
    let mut weights = vec![0.0; k];
    let mut probs = vec![0.0; k];
    for (z, logits) in features.data().chunks_exact(d).zip(task_logits.data().chunks_exact(k)) {
        softmax_into(logits, &mut probs);
        for c in 0..k {
            weights[c] += probs[c];
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(z) {
                *s += probs[c] * v;
            }
        }
    }
    let mut mean = vec![0.0; d];
    for z in features.data().chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(z) {
            *m += v / n as f64;
        }
    }
    let mut degenerate = vec![false; k];
    for c in 0..k {
        let row = &mut sums[c * d..(c + 1) * d];
        if weights[c] < DEGENERATE_WEIGHT {
            degenerate[c] = true;
            let fallback = previous.map_or(mean.as_slice(), |p| p.row(c));
            if norm(fallback) == 0.0 {
                return Err(TrainError::DegenerateCentroid(c));
            }
            row.copy_from_slice(fallback);
        } else {
            row.iter_mut().for_each(|v| *v /= weights[c]);
        }
    }
    Ok(Centroids {
        centroids: Tensor::new(vec![k, d], sums)?,
        degenerate,
    })
}

/// Index of the centroid with the smallest cosine distance to each feature
/// row; ties go to the lower index.
pub fn assign_pseudo_labels(features: &Tensor, centroids: &Tensor) -> Result<Vec<usize>, TrainError> {
    let (_, d) = dims(features)?;
    let (k, dc) = dims(centroids)?;
    if d != dc {
        return Err(TrainError::InvalidSchedule(format!("feature width {d}, centroid width {dc}")));
    }
    let c_norms: Vec<f64> = centroids.data().chunks_exact(d).map(norm).collect();
    if let Some(c) = c_norms.iter().position(|&v| v == 0.0) {
        return Err(TrainError::DegenerateCentroid(c));
    }
    features
        .data()
        .chunks_exact(d)
        .enumerate()
        .map(|(i, z)| {
            let zn = norm(z);
            if zn == 0.0 {
                return Err(TrainError::ZeroNormFeature(i));
            }
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let dist = 1.0 - dot(z, centroids.row(c)) / (zn * c_norms[c]);
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            Ok(best.0)
        })
        .collect()
}

fn dims(t: &Tensor) -> Result<(usize, usize), TrainError> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(TrainError::InvalidSchedule(format!("expected a matrix, got {s:?}"))),
    }
}

/// Centroids and assignments for the target set, with their age in epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelState {
    pub centroids: Option<Tensor>,
    pub assignments: Vec<usize>,
    pub refresh_every: usize,
    /// Epochs since the last refresh.
    pub age: usize,
}

impl PseudoLabelState {
    pub fn new(refresh_every: usize) -> Self {
        Self {
            centroids: None,
            assignments: Vec::new(),
            refresh_every: refresh_every.max(1),
            age: 0,
        }
    }

    pub fn is_due(&self) -> bool {
        self.centroids.is_none() || self.age >= self.refresh_every
    }

    /// Fails once the labels are more than twice the refresh period old.
    pub fn check_fresh(&self) -> Result<(), TrainError> {
        if self.centroids.is_some() && self.age > 2 * self.refresh_every {
            return Err(TrainError::StalePseudoLabels {
                age: self.age,
                refresh_every: self.refresh_every,
            });
        }
        Ok(())
    }

    /// Recomputes centroids and assignments from fresh features and logits.
    pub fn refresh(&mut self, features: &Tensor, task_logits: &Tensor) -> Result<(), TrainError> {
        let c = compute_centroids(features, task_logits, self.centroids.as_ref())?;
        self.assignments = assign_pseudo_labels(features, &c.centroids)?;
        self.centroids = Some(c.centroids);
        self.age = 0;
        Ok(())
    }
}
