//! Composed image retrieval benchmark toolkit.
//!
//! Subset mining over precomputed image features, pair drawing and split
//! assignment, the annotation file format, retrieval metrics, trainable
//! image-text composers and a soft-triplet metric-learning loop.

pub mod composers;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod metrics;
pub mod miner;
pub mod model;
pub mod pairs;
pub mod submission;
pub mod synthetic;
pub mod text;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use features::FeatureStore;
pub use model::{ImageId, PairRecord, Split, Subset};
