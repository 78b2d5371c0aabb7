//! Desk-scale bilingual CTC laboratory.
//!
//! The crate is organized around a pure CTC lattice core (`ctc`), a small
//! reverse-mode tensor substrate (`nn`), an encoder-decoder with dual
//! transcript/translation CTC heads (`model`), inference engines
//! (`decode`), a deterministic synthetic transduction task (`data`),
//! evaluation metrics (`metrics`), and a training harness (`train`).

pub mod ctc;
pub mod data;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use ctc::{AlignmentPath, LabelSequence, LogProbMatrix};
pub use error::{Error, Result};
pub use model::{BilCtcModel, LossBreakdown, ModelSpec};
pub use nn::ParameterStore;
