use crate::vit::ParamGroup;

use super::TrainError;

/// Epoch counts and stopping rules for both training stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub vendor_epochs: usize,
    pub vendor_warmup_epochs: usize,
    pub warmup_factor: f64,
    /// Domain epochs after each vendor task epoch.
    pub vendor_domain_epochs: usize,
    pub max_rounds: usize,
    pub task_epochs_per_round: usize,
    pub domain_acc_target: f64,
    pub max_domain_epochs: usize,
    pub batch_size: usize,
    pub refresh_every: usize,
    pub vendor_task_lr: f64,
    pub vendor_domain_lr: f64,
    pub client_task_lr: f64,
    pub client_domain_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            vendor_epochs: 20,
            vendor_warmup_epochs: 10,
            warmup_factor: 0.01,
            vendor_domain_epochs: 1,
            max_rounds: 10,
            task_epochs_per_round: 2,
            domain_acc_target: 0.8,
            max_domain_epochs: 50,
            batch_size: 32,
            refresh_every: 1,
            vendor_task_lr: 1e-2,
            vendor_domain_lr: 5e-3,
            client_task_lr: 1e-3,
            client_domain_lr: 5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::InvalidSchedule(m));
        if !(self.domain_acc_target > 0.0 && self.domain_acc_target <= 1.0) {
            return fail(format!("domain_acc_target {} outside (0, 1]", self.domain_acc_target));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.refresh_every == 0 {
            return fail("refresh_every must be positive".into());
        }
        if self.vendor_warmup_epochs > self.vendor_epochs {
            return fail("warm-up longer than vendor training".into());
        }
        if !(self.warmup_factor > 0.0 && self.warmup_factor <= 1.0) {
            return fail(format!("warmup_factor {} outside (0, 1]", self.warmup_factor));
        }
        let rates = [
            self.vendor_task_lr,
            self.vendor_domain_lr,
            self.client_task_lr,
            self.client_domain_lr,
            self.momentum,
            self.weight_decay,
        ];
        if rates.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail("learning rates, momentum and weight decay must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Which parameters each loss may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    /// Query projections are trained by the domain loss only.
    Split,
    /// No domain training; the task loss updates the whole backbone.
    Joint,
}

impl Routing {
    pub fn task_groups(self) -> &'static [ParamGroup] {
        match self {
            Routing::Split => &[ParamGroup::BackboneRest, ParamGroup::HeadTask],
            Routing::Joint => &[ParamGroup::ThetaQ, ParamGroup::BackboneRest, ParamGroup::HeadTask],
        }
    }

    pub fn domain_groups(self) -> &'static [ParamGroup] {
        &[ParamGroup::ThetaQ, ParamGroup::HeadDomain]
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainFlags {
    pub dst_enabled: bool,
    pub dri_enabled: bool,
    pub lambda_pl: f64,
    /// Feeds shuffled inputs with their pre-shuffle labels into vendor task
    /// training.
    pub negative_control: bool,
}

impl Default for TrainFlags {
    fn default() -> Self {
        Self {
            dst_enabled: true,
            dri_enabled: true,
            lambda_pl: 0.3,
            negative_control: false,
        }
    }
}

impl TrainFlags {
    pub fn routing(&self) -> Routing {
        if self.dst_enabled {
            Routing::Split
        } else {
            Routing::Joint
        }
    }

    /// Shuffle grid for domain inputs: without DRI they are only augmented.
    pub fn domain_grid(&self, grid: usize) -> usize {
        if self.dri_enabled {
            grid
        } else {
            1
        }
    }
}
