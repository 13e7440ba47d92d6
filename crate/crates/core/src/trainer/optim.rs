use crate::vit::{ParamGroup, ParamStore};

use super::TrainError;

/// Linear learning-rate ramp from `factor·lr` to `lr` over `epochs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warmup {
    pub epochs: usize,
    pub factor: f64,
}

impl Warmup {
    pub const NONE: Warmup = Warmup { epochs: 0, factor: 1.0 };
}

/// SGD with momentum and L2 weight decay folded into the gradient. Momentum
/// buffers live on the parameters themselves and are created on first use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup: Warmup,
}

impl OptimState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup: Warmup::NONE,
        }
    }

    pub fn with_warmup(mut self, warmup: Warmup) -> Self {
        self.warmup = warmup;
        self
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let w = self.warmup;
        if epoch >= w.epochs {
            return self.lr;
        }
        self.lr * (w.factor + (1.0 - w.factor) * epoch as f64 / w.epochs as f64)
    }

    /// Copy with the warm-up applied for `epoch`.
    pub fn at_epoch(&self, epoch: usize) -> Self {
        Self {
            lr: self.lr_at(epoch),
            warmup: Warmup::NONE,
            ..*self
        }
    }
}

/// `v ← m·v + g + wd·p; p ← p − lr·v` on the parameters of `groups` only.
/// Every other parameter and momentum buffer is left untouched.
pub fn sgd_step(params: &mut ParamStore, groups: &[ParamGroup], opt: &OptimState) -> Result<(), TrainError> {
    if let Some(p) = params
        .iter()
        .find(|p| groups.contains(&p.group) && p.tensor.grad().is_none())
    {
        return Err(TrainError::MissingGradient(p.name.clone()));
    }
    for p in params.iter_mut().filter(|p| groups.contains(&p.group)) {
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let (tensor, velocity) = p.tensor_and_velocity();
        for ((w, v), g) in tensor.data_mut().iter_mut().zip(velocity.iter_mut()).zip(grad) {
            *v = opt.momentum * *v + g + opt.weight_decay * *w;
            *w -= opt.lr * *v;
        }
    }
    Ok(())
}
