//! Differentiable operations, recorded as methods on [`Tape`](crate::Tape).

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod norm;
