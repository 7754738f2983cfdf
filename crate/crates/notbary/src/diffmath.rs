//! Dense-tensor reverse-mode automatic differentiation with multilayer
//! perceptrons and the Adam optimizer.
//!
//! The design is tape-style: every forward pass builds a fresh [`Graph`]
//! whose nodes hold 64-bit float tensors, and [`Graph::backward`] walks the
//! tape in reverse from a scalar root, populating gradients for all
//! reachable nodes. Graphs are never reused between steps.

mod adam;
mod finitediff;
mod graph;
mod mlp;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use finitediff::finite_diff_grad;
pub use graph::{Graph, NodeId};
pub use mlp::{mlp_forward, Activation, Layer, MlpBinding, MlpParams};
pub use tensor::Tensor;

pub(crate) use graph::twist_rows;
