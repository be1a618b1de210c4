//! Token-embedding matrices, the providers that produce them, and pooling.

mod emb_file;
mod hash;
mod pooling;

pub use emb_file::{write_embeddings, EmbeddingStore};
pub use hash::{hash_encode, token_vector, HashEncoder};
pub use pooling::{
    pool, pool_backward, pool_cls, pool_concat, pool_mean, Mode, PoolCache, PoolParams, PooledVector, Pooling,
};

use ndarray::{Array2, ArrayView1};
use thiserror::Error;

use crate::corpus::Page;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("bad magic bytes, expected EMB1")]
    BadMagic,
    #[error("unsupported EMB1 version {0}")]
    VersionMismatch(u32),
    #[error("truncated embedding file: {0}")]
    TruncatedFile(String),
    #[error("no embeddings for page ({lang}, {page_id})")]
    MissingPage { lang: String, page_id: u64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid embedding record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A `(seq + 1) x d` matrix: row 0 is the CLS row, rows `1..=seq` are token
/// positions. Rows past `n_tokens` are zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Array2<f32>,
    n_tokens: usize,
}

impl EmbeddingMatrix {
    pub fn new(rows: Array2<f32>, n_tokens: usize) -> Result<Self, EncoderError> {
        let seq = rows.nrows().checked_sub(1).ok_or_else(|| {
            EncoderError::InvalidRecord("matrix needs at least the CLS row".into())
        })?;
        if n_tokens > seq {
            return Err(EncoderError::InvalidRecord(format!(
                "n_tokens {n_tokens} exceeds seq {seq}"
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::InvalidRecord("non-finite entry".into()));
        }
        if rows.slice(ndarray::s![n_tokens + 1.., ..]).iter().any(|&v| v != 0.0) {
            return Err(EncoderError::InvalidRecord("padding rows must be zero".into()));
        }
        Ok(Self { rows, n_tokens })
    }

    pub fn zeros(seq: usize, d: usize) -> Self {
        Self {
            rows: Array2::zeros((seq + 1, d)),
            n_tokens: 0,
        }
    }

    pub fn d(&self) -> usize {
        self.rows.ncols()
    }

    pub fn seq(&self) -> usize {
        self.rows.nrows() - 1
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn cls(&self) -> ArrayView1<'_, f32> {
        self.rows.row(0)
    }

    /// Token at 1-based position `pos`.
    pub fn token(&self, pos: usize) -> ArrayView1<'_, f32> {
        self.rows.row(pos)
    }

    pub fn rows(&self) -> &Array2<f32> {
        &self.rows
    }
}

/// Source of embedding matrices for pages.
pub trait EmbeddingProvider: Sync {
    fn embed(&self, page: &Page) -> Result<EmbeddingMatrix, EncoderError>;
    fn d(&self) -> usize;
    fn seq(&self) -> usize;
}
