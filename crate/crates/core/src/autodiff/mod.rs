//! Minimal reverse-mode differentiable arrays.
//!
//! The engine records exactly the operations the relational model needs
//! (affine maps, a fused GRU cell, Mish, masked softmax, same-time pair
//! attention kernels, Gaussian NLL and a few shape utilities) on an
//! append-only [`Graph`]. Parameters live in a [`ParamStore`] outside the
//! record and are bound as leaves for each forward pass.

pub mod adam;
mod backprop;
pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod params;
pub mod real;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use ops::{concat_last, gru_cell, stack, MASK_VALUE};
pub use params::{Gradients, ParamId, ParamStore};
pub use real::Real;
pub use tape::{Graph, PairDims, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("softmax row has every slot masked")]
    DegenerateRow,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("variable belongs to a computation record that was already consumed")]
    StaleRecord,
}
