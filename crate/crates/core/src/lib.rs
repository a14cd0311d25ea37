//! Label-embedding recurrent taggers for slot filling.
//!
//! The taggers feed embeddings of their own previous predictions back as
//! input next to a window of word embeddings. Three hidden-layer variants
//! are provided (ReLU, GRU, and a deep two-level network), each in forward
//! and backward directions with a geometric-mean bidirectional combination.
//! Gradients are derived by hand and checked against finite differences.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod layers;
pub mod math;
pub mod model;
pub mod par;
pub mod pretrain;
pub mod train;

pub use error::{Error, Result};
