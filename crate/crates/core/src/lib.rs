//! Multivariate time-series anomaly detection with patch tokens, skip
//! ordering, contrastive feature embeddings and a partially frozen
//! transformer backbone.

pub mod backbone;
pub mod commands;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod detector;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod tokenizer;

pub use error::{Error, ErrorKind, Result};
