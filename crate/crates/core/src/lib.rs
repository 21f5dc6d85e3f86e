//! Few-shot image classification with multi-scale local representations,
//! adaptive task attention and top-k similarity-to-class scoring.
//!
//! The crate carries its own small tensor/autodiff engine ([`autodiff`]),
//! the network modules built on it, and an episodic training/evaluation
//! harness with dataset and checkpoint I/O.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod episode;
mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod generator;
pub mod layers;
pub mod model;
pub mod optim;
mod real;
pub mod similarity;
mod tensor;
pub mod train;

pub use attention::{Metric, SemanticRelationMatrix, TanimotoForm, TaskAttentionMask};
pub use config::{Ablation, ArchConfig, Config, HeadConfig};
pub use error::{Error, Result};
pub use model::ModelState;
pub use real::{gemm, Real};
pub use tensor::Tensor;
