//! Training framework for AI-generated image detection with multi-task
//! forgery supervision.
//!
//! The crate is organized along the pipeline:
//!
//! - [`forge`] synthesizes manipulated samples and their two masks.
//! - [`datapipe`] reads manifests, subsamples epochs, crops and augments.
//! - [`model`] is the dual-decoder detector with reverse cross-attention,
//!   built on the small reverse-mode engine in [`autograd`].
//! - [`trainer`] assembles the weighted three-term loss and runs Adam.
//! - [`evalkit`] computes metrics, robustness sweeps and reports.

pub mod autograd;
pub mod datapipe;
pub mod error;
pub mod evalkit;
pub mod forge;
pub mod gradcheck;
pub mod model;
mod parallel;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Graph, ParamId, ParamStore, Var};
pub use error::{Error, Result};
pub use forge::{assign_labels, LabelConfig, MaskPair, SourceCategory};
pub use tensor::Tensor;
