use super::ModelError;

/// Hidden width of each MLP block relative to the embedding width.
pub const MLP_RATIO: usize = 4;

/// Architecture of the miniature vision transformer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VitConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    pub seed: u64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 4,
            num_classes: 4,
            num_domains: 5,
            seed: 0,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("num_classes", self.num_classes),
            ("num_domains", self.num_domains),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length: class token, domain token, then patches.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 2
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * MLP_RATIO
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Closed-form parameter count for this architecture.
    pub fn parameter_count(&self) -> usize {
        let d = self.embed_dim;
        let m = self.mlp_dim();
        let patch = self.patch_dim() * d + d;
        let tokens = 2 * d + self.tokens() * d;
        let layer = 4 * (d * d + d) + 4 * d + (d * m + m) + (m * d + d);
        let heads = (d * self.num_classes + self.num_classes) + (d * self.num_domains + self.num_domains);
        patch + tokens + self.num_layers * layer + 2 * d + heads
    }
}
