//! Soft-kNN adversarial robustness toolkit.
//!
//! Implements the ASK (adversarial soft-kNN) loss with its analytic
//! gradients, the ASK attack (projected sign-gradient ascent on that loss),
//! the ASK defense (minimax training mixing a cross-entropy generator with an
//! ASK generator), exact per-class nearest-neighbor search, and the DkNN
//! plurality-vote classifier used to evaluate everything.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod io;
pub mod knn;
pub mod loss;
pub mod model;
pub mod rng;

pub use data::LabeledDataset;
pub use error::{Error, Result};
pub use knn::{KnnIndex, Metric, ReferenceSet};
pub use model::{Encoder, GradientBundle, SoftmaxHead};
pub use rng::SeedSplitter;
