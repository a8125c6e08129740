//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine records a dynamic tape per forward pass ([`Graph`]) and
//! replays it backwards to obtain gradients ([`Gradients`]). Parameters live
//! in a [`ParamStore`] that also owns the checkpoint format, and [`Adam`]
//! applies first-order updates.

pub mod error;
pub mod graph;
pub mod grid;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use grid::{Affine2, BilinearGrid};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
