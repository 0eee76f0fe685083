//! Attribute-level data augmentation for fine-grained recognition.
//!
//! The crate is organised bottom-up:
//!
//! - [`engine`]: dense arrays, reverse-mode autodiff, SGD, checkpoints.
//! - [`attrnet`]: the attribute classifier (conv backbone, 1×1 head with
//!   `k·C` channels, global average pooling) and score combination.
//! - [`attributes`]: multi-hot labels, attention masks, erasing and the
//!   iterative attribute-mining loop.
//! - [`mixer`]: Attribute Mix, the Beta ratio sampler, the cosine gate, and
//!   Mixup/CutMix baselines.
//! - [`transfer`]: attribute-level pseudo labels for unlabeled images,
//!   entropy ranking and the enlarged training stream.
//! - [`synthbench`]: a deterministic synthetic fine-grained dataset with
//!   ground-truth part boxes.
//! - [`harness`]: training, evaluation, sweeps and the on-disk formats used
//!   by the `attrmix` binary.

pub mod attributes;
pub mod attrnet;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod harness;
pub mod image;
pub mod mixer;
pub mod rng;
pub mod synthbench;
pub mod transfer;

pub use error::{Error, Result};
