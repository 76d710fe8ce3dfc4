//! Reverse-mode automatic differentiation over dense row-major `f64` tensors.
//!
//! Parameters live in a [`ParamSet`]. A [`Graph`] borrows the set immutably,
//! records a forward pass, and [`Graph::backward`] returns [`Gradients`] which
//! the caller folds back with [`ParamSet::accumulate`]. Accumulation is
//! additive until [`ParamSet::zero_grad`] (or an optimizer step) clears it.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use graph::{Fault, Graph, Var, MASK_FILL};
pub use params::{Gradients, Param, ParamId, ParamSet};
pub use tensor::Tensor;
