//! Classifier heads: a linear scorer (leaf or multi-level targets) and the
//! GRU sequential decoder with hierarchical masking.

mod gru;
mod linear;
mod resolve;

pub use gru::{gru_backward, gru_cell, gru_forward, input_width, GruCache, GruHead, GruParams, GruTrace, DecodePath};
pub use linear::LinearHead;
pub use resolve::{best_leaf_descendant, resolve_to_leaves};

use thiserror::Error;

use crate::ontology::OntologyError;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("decode reached label {0} with no children before a leaf")]
    DeadEnd(String),
    #[error("invalid gold path: {0}")]
    InvalidPath(String),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}
