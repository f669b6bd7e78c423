//! Deterministic reverse-mode automatic differentiation over dense tensors.
//!
//! The engine is deliberately small: a [`Tape`] records ops eagerly, each
//! op stores a backward closure, and [`Tape::backward`] sweeps the tape once
//! in reverse. Convolutions lower to GEMM through `matrixmultiply`. Batch
//! items are processed through [`par`], which uses rayon when the
//! `parallel` feature is on and reduces in index order either way, so
//! results do not depend on the thread count.

pub mod element;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod par;
pub mod params;
pub mod tape;
pub mod tensor;

pub use element::Element;
pub use ops::conv::{conv2d_tensor, pad_tensor, upsample2x_tensor, ConvGeom, Padding, WidthPad};
pub use ops::linalg::power_iteration;
pub use ops::norm::{NormGroups, NormStats};
pub use optim::{Adam, AdamConfig, AdamSlot};
pub use params::{Binding, ParamId, ParamStore};
pub use tape::{BackwardCtx, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("non-finite values in {0}")]
    NonFinite(String),
}
