//! Minimal reverse-mode substrate: tape, transformer blocks, Adam.

pub mod graph;
pub mod layers;
pub mod store;

pub use graph::{softmax_rows, Graph, TensorId};
pub use store::{inv_sqrt_lr, Init, ParameterStore};
