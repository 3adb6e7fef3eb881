//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! A [`Graph`] records operations on [`Var`] handles; `backward` walks the record in
//! reverse. Parameters live in a [`ParamStore`] and are attached to a graph through a
//! [`Bound`] view, which decides whether they receive gradients.

mod error;
mod graph;
pub mod kernels;
pub mod ops;
mod optim;
pub mod par;
mod params;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Grads, Graph, Var};
pub use ops::{sigmoid, softplus};
pub use optim::{grad_norm, Adam};
pub use params::{Bound, ParamId, ParamKind, ParamStore, Path};
pub use real::Real;
pub use tensor::{broadcast_zip, numel, sum_to, Tensor};
