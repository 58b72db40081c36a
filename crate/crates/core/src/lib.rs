//! Source-free domain adaptation by adaptive local transfer.
//!
//! A source-trained classifier is adapted to an unlabeled target domain by
//! splitting target samples into an inner set, regularized toward agreement
//! with their similarity-weighted bank neighbors, and an outlier set,
//! regularized for weak-to-strong augmentation consistency. The split
//! follows per-class learning progress.
//!
//! Module map:
//! - [`numerics`]: dense kernels (softmax, cosine, cross-entropy, ranks, PCA)
//! - [`model`], [`optim`], [`checkpoint`]: network, gradients, SGD, persistence
//! - [`bank`]: feature/prediction memory bank with exact KNN
//! - [`division`]: learning state and inner/outlier partition
//! - [`objectives`]: the three loss terms and their composition
//! - [`data`]: synthetic domain pairs, augmentation, expansion checker
//! - [`analysis`]: diagnostics and evaluation
//! - [`config`], [`harness`]: run configuration and the CLI commands

// `!(x > y)` guards are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod data;
pub mod division;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod optim;

pub use error::{AltError, Result};
