//! Spatial information bottleneck (S-IB) training on a self-contained
//! reverse-mode autodiff core, plus post-hoc attribution methods and the
//! evaluation protocol to measure them, all runnable on synthetic datasets
//! with exact foreground masks.
//!
//! Module map:
//! - [`tensor`] / [`autodiff`]: dense f64 tensors and a re-differentiable
//!   tape (gradients of gradients are structural, not special-cased).
//! - [`models`]: a small CNN classifier with activation capture and SGD.
//! - [`sib`]: VJP decoding `R = J^T p`, differentiable mask generation,
//!   foreground HSIC alignment, background variance compression, and the
//!   combined training objective.
//! - [`explain`]: saliency, guided backprop, integrated gradients, GradCAM,
//!   GradCAM++, ScoreCAM.
//! - [`eval`]: localization metrics, insertion/deletion faithfulness curves,
//!   HSIC quadrant diagnostics, and the analytic bound checkers.
//! - [`data`]: synthetic scene generation with exact masks, PGM folder I/O.
//! - [`config`] / [`cli`]: run configuration and the operator commands.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod models;
pub mod sib;
pub mod tensor;

pub use error::{Result, SibError};
pub use tensor::Tensor;
