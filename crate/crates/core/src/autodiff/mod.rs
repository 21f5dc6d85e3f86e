//! Tape-based reverse-mode automatic differentiation over [`Tensor`](crate::Tensor).

mod conv;
mod graph;
mod loss;
mod norm;
mod ops;

pub use conv::Padding;
pub use graph::{Gradients, Graph, Kink, Var};
pub use norm::{BatchStats, NormStats};

pub(crate) use ops::transpose_batched;
