//! Multimodal graph recommendation with an enhanced behavior graph,
//! disentangled modality fusion and bi-level weighted modality-behavior
//! alignment.
//!
//! The pipeline is: load and split interactions ([`dataset`]), build Top-K
//! item graphs ([`knn_graph`]), train the model ([`model`], [`trainer`]) and
//! score it with full-ranking metrics ([`evaluator`]). [`experiment`] chains
//! the stages with on-disk caching.

pub mod alignment;
pub mod behavior;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod features;
pub mod fusion;
pub mod knn_graph;
pub mod modality;
pub mod model;
pub mod ops;
pub mod sparse;
pub mod synthetic;
pub mod trainer;

pub use error::{EgraError, Result};
