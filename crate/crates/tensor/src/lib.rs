//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Operations on tensors that require gradients record a link to their
//! inputs; [`Tensor::backward`] walks that graph once from a scalar loss and
//! returns the gradients of every trainable leaf. Tensors are immutable and
//! `Send + Sync`; the graph is freed with the last tensor referencing it.

mod backward;
mod element;
mod error;
mod kernel;
pub mod gradcheck;
mod ops;
pub mod shape;
mod tensor;

pub use backward::{graph_order, Gradients};
pub use element::Element;
pub use error::{Result, TensorError};
pub use ops::{elementwise, Elementwise};
pub use tensor::{Tensor, TensorId};
