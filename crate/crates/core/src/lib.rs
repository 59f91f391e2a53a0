//! Pluggable entity lookup tables for a tied-weight masked language model.
//!
//! The pipeline trains a small BERT-style encoder whose output softmax reuses
//! the input word embeddings, recovers an embedding for each entity from the
//! output representations at masked occurrences, and splices those vectors
//! back into inputs as bracketed pseudo-tokens.

pub mod error;
pub mod infuse;
pub mod linker;
mod binio;
pub mod corpus;
pub mod model;
pub mod numerics;
pub mod pelt;
pub mod probe;

pub use error::{Error, Result};
