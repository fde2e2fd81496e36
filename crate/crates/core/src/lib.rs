//! Skeleton-based zero-shot action recognition.
//!
//! A spatio-temporal graph-convolution encoder turns skeleton sequences into
//! visual features; two zero-shot heads match those features against
//! class-label embeddings so that classes never seen in training can be
//! recognized:
//!
//! - [`devise`]: a linear projection into the embedding space trained with a
//!   hinge rank loss, scored by dot product.
//! - [`relation`]: an attribute network projecting embeddings into feature
//!   space and a relation network scoring (embedding, feature) pairs, trained
//!   episodically with mean squared error.
//!
//! [`pipeline`] wires data generation, encoder training, feature extraction,
//! split selection, head training and evaluation into one reproducible run.

pub mod dataset;
pub mod devise;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod numerics;
pub mod pipeline;
pub mod relation;
pub mod skeleton;
pub mod split;
pub mod synthetic;

pub use error::{Error, Result};
