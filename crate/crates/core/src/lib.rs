//! Generative recommendation with multiple item identifiers.
//!
//! The pipeline tokenizes items with a residual-quantization autoencoder,
//! keeps the checkpoints of several consecutive training epochs as a family
//! of related tokenizers, and pre-trains an encoder-decoder recommender on a
//! mixture of their token sequences. The mixture weights follow a curriculum
//! driven by first-order estimates of each tokenizer's influence on the
//! validation loss.

mod binio;
pub mod curriculum;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod influence;
pub mod family;
pub mod nn;
pub mod optim;
pub mod recommender;
pub mod report;
pub mod rqvae;
pub mod seed;
pub mod tape;

pub use error::{Error, Result};
