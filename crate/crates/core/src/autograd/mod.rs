//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

mod graph;
pub(crate) mod kernels;

pub use graph::{Grads, Graph, Mode, Var};
