//! Dense `f64` tensors with a tape for reverse-mode automatic differentiation.
//!
//! Values are recorded on a [`Tape`] as the forward pass runs; calling
//! [`Tape::backward`] on a scalar output walks the tape in reverse and
//! returns the gradient of every leaf that was marked as requiring one.
//!
//! ```
//! use dsit_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
//! ```

mod error;
pub mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Epsilon used by transformer layer norms.
pub const LAYERNORM_EPS: f64 = 1e-5;
