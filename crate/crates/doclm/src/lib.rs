//! Language modeling with direct output connections.
//!
//! The output layer mixes several softmax distributions whose inputs are
//! drawn from designated layers of a stacked LSTM (embeddings included), with
//! per-context gate weights computed from the final hidden state. Around that
//! head: corpus handling, an SGD/averaged-SGD training regime with a
//! non-monotone trigger, rank and gate-balance diagnostics, ensembling,
//! candidate reranking, and a toy attentional encoder-decoder that reuses the
//! same head in its decoder.

pub mod config;
pub mod corpus;
pub mod doc;
pub mod error;
pub mod lstm;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
