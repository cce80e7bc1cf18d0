//! Probing frozen tabular-transformer embeddings for causal structure.
//!
//! This crate trains a small learnable decoder on top of a frozen
//! dual-attention tabular encoder to predict the adjacency matrix of the
//! structural causal model (SCM) that generated a table. It contains:
//!
//! - [`scm`]: synthetic SCM sampling — random DAGs from six graph families,
//!   linear and random-Fourier-feature mechanisms, observational and
//!   single-variable interventional sampling, and a binary dataset format.
//! - [`tape`]: a reverse-mode autodiff engine over `f64` tensors, tuned for
//!   dual-attention transformers.
//! - [`model`]: the frozen encoder, the causal-token decoder variants, and
//!   adjacency prediction.
//! - [`objective`]: weighted edge BCE, a differentiable spectral-radius
//!   acyclicity penalty, and the augmented Lagrangian combination.
//! - [`train`]: AdamW with cosine annealing, seeded batch sampling, metrics
//!   logging, and resumable checkpoints.
//! - [`eval`]: threshold-free ranking metrics (ROC AUC, average precision),
//!   the evaluation harness, and ablation drivers.
//! - [`cli`]: the command-line front end (`generate`, `train`, `eval`,
//!   `ablate`, `inspect`).
//!
//! See the `examples/` directory for runnable entry points covering each of
//! these capabilities.

pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod scm;
pub mod seeds;
pub mod tape;
pub mod tensor_store;
pub mod train;

pub use error::{Error, Result};
