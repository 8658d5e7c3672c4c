//! Stacked multi-scale dilated convolution dual encoder for cross-modal
//! sequence retrieval.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: `f64` arrays, a reverse-mode tape and
//!   finite-difference verification.
//! - [`temporal_conv`]: dilated convolution, multi-scale blocks and the stacked
//!   local encoder.
//! - [`encoders`]: bidirectional GRU and Transformer global encoders, mean
//!   pooling and frozen embedding tables.
//! - [`joint`]: fusion, FC + batch-norm projection, cosine similarity and the
//!   hard-negative ranking loss.
//! - [`metrics`]: R@K, MedR, MeanR, mAP and RSum.
//! - [`data`]: feature files, manifests, batching and the synthetic corpus.
//! - [`train`]: configuration, Adam, plateau schedule, checkpoints and the
//!   training/evaluation loop.
//! - [`cli`]: the `smsdc` command-line front end.

pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod joint;
pub mod metrics;
pub mod params;
pub mod temporal_conv;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Activation, Gradients, Graph, Var};
pub use params::{Bound, ParamKey, ParamStore};
pub use tensor::Tensor;
