//! From-scratch metric-learning toolkit for resin-code image classification.
//!
//! The crate provides a minimal dense-tensor engine with hand-written
//! backpropagation, Siamese and triplet embedding networks, dataset tooling
//! (loading, preprocessing, splitting, pair/triplet sampling, a synthetic
//! generator), training with SGD + momentum, one-shot and KNN evaluation
//! protocols, and PCA/LDA-based novelty detection with a radius/count
//! outlier rule.

pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod nets;
pub mod novelty;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
