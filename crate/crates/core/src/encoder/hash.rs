use ndarray::{Array1, Array2};

use super::{EmbeddingMatrix, EmbeddingProvider, EncoderError};
use crate::corpus::Page;
use crate::hashing::{fnv1a64, splitmix64};

const TWO_POW_64: f64 = 18_446_744_073_709_551_616.0;

/// Deterministic pseudo-embedding of one token: component `j` is
/// `2u - 1` with `u = splitmix64(seed ^ fnv1a64(token) ^ j) / 2^64`.
pub fn token_vector(token: &str, d: usize, seed: u64) -> Array1<f32> {
    let h = fnv1a64(token.as_bytes());
    Array1::from_shape_fn(d, |j| {
        let u = splitmix64(seed ^ h ^ j as u64) as f64 / TWO_POW_64;
        (2.0 * u - 1.0) as f32
    })
}

/// Whitespace tokenization, lowercasing, truncation to `seq` tokens. The CLS
/// row is the mean of the token rows (zero when there are none).
pub fn hash_encode(text: &str, d: usize, seq: usize, seed: u64) -> EmbeddingMatrix {
    assert!(d >= 1 && seq >= 1, "d and seq must be positive");
    let mut rows = Array2::<f32>::zeros((seq + 1, d));
    let mut sum = vec![0.0f64; d];
    let mut n = 0;
    for token in text.split_whitespace().take(seq) {
        n += 1;
        let v = token_vector(&token.to_lowercase(), d, seed);
        for (j, x) in v.iter().enumerate() {
            sum[j] += *x as f64;
        }
        rows.row_mut(n).assign(&v);
    }
    if n > 0 {
        for (j, s) in sum.iter().enumerate() {
            rows[[0, j]] = (s / n as f64) as f32;
        }
    }
    EmbeddingMatrix { rows, n_tokens: n }
}

/// Provider that hash-encodes page text on demand.
#[derive(Debug, Clone, Copy)]
pub struct HashEncoder {
    pub d: usize,
    pub seq: usize,
    pub seed: u64,
}

impl EmbeddingProvider for HashEncoder {
    fn embed(&self, page: &Page) -> Result<EmbeddingMatrix, EncoderError> {
        Ok(hash_encode(&page.text, self.d, self.seq, self.seed))
    }

    fn d(&self) -> usize {
        self.d
    }

    fn seq(&self) -> usize {
        self.seq
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_token_has_identical_rows() {
        let e = hash_encode("Foo bar foo", 8, 6, 3);
        assert_eq!(e.n_tokens(), 3);
        assert_eq!(e.token(1), e.token(3));
        assert_ne!(e.token(1), e.token(2));
        assert!(e.rows().slice(ndarray::s![4.., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_text() {
        let e = hash_encode("   ", 4, 5, 1);
        assert_eq!(e.n_tokens(), 0);
        assert!(e.rows().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn truncates_to_seq() {
        let e = hash_encode("a b c d e", 2, 3, 0);
        assert_eq!(e.n_tokens(), 3);
        assert_eq!(e.seq(), 3);
    }

    // Independent re-derivation of the two hash functions.
    fn oracle_component(token: &str, j: u64, seed: u64) -> f64 {
        let mut h: u64 = 14695981039346656037;
        for b in token.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(1099511628211);
        }
        let mut z = (seed ^ h ^ j).wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
        2.0 * (z as f64 / 2f64.powi(64)) - 1.0
    }

    #[test]
    fn cls_is_mean_of_tokens() {
        let seed = 0x5eed;
        let e = hash_encode("a b", 4, 8, seed);
        for j in 0..4 {
            let a = oracle_component("a", j as u64, seed);
            let b = oracle_component("b", j as u64, seed);
            assert!((e.token(1)[j] as f64 - a).abs() < 1e-7);
            assert!((e.token(2)[j] as f64 - b).abs() < 1e-7);
            assert!((e.cls()[j] as f64 - (a + b) / 2.0).abs() < 1e-7);
        }
    }
}
