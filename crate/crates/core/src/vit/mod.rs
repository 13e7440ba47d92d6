//! Miniature vision transformer with a class token, a domain token and
//! parameter groups for gradient routing.

mod checkpoint;
mod config;
mod model;
mod params;

use dsit_tensor::TensorError;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{VitConfig, MLP_RATIO};
pub use model::{patchify, PIXEL_MEAN, PIXEL_STD, patchify_batch, unpatchify, ForwardOutput, Inference, VitModel};
pub use params::{BoundParams, Param, ParamGroup, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error(transparent)]
    Tensor(TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VitModel {
    /// Names of the parameters in each group, in registration order.
    pub fn group_params(&self) -> Vec<(ParamGroup, Vec<&str>)> {
        ParamGroup::ALL
            .iter()
            .map(|&g| (g, self.params().in_group(g).map(|p| p.name.as_str()).collect()))
            .collect()
    }
}
