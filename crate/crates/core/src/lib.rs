//! Hierarchical multi-label text classification over frozen token
//! embeddings: a dotted-ID label ontology, CLS/MEAN/CONCAT pooling, flat
//! and sequential (GRU) classifier heads trained with hand-written
//! backward passes, decision strategies with threshold tuning, and
//! micro/macro evaluation.

pub mod checkpoint;
pub mod config;
pub mod cli;
pub mod corpus;
pub mod decision;
pub mod encoder;
pub mod hashing;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod ontology;
pub mod pipeline;
pub mod synthetic;
pub mod trainer;

pub use ontology::{LabelId, Ontology, OntologyError};
