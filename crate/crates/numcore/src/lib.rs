//! Minimal dense-tensor numeric core.
//!
//! Tensors are row-major `f64` arrays. Differentiable programs are written
//! against a [`Graph`], which records every operation as it runs and can
//! replay them backwards to produce exact gradients. A fresh graph is built
//! for every training step; nothing persists between steps except the
//! [`ParamStore`].

mod error;
mod kernels;
mod tensor;

pub mod checkpoint;
pub mod func;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;

pub use error::{NumError, Result};
pub use graph::{Graph, Grads, MaskVariant, Var};
pub use kernels::{erf, gelu_scalar, GELU_FORM};
pub use params::{Gradients, ParamStore};
pub use tensor::Tensor;
