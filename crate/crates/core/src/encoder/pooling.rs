//! CLS, MEAN and CONCAT pooling with the backward pass for the trainable
//! CLS projection.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{EmbeddingMatrix, EncoderError};
use crate::numeric::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Cls,
    Mean,
    Concat,
}

impl Pooling {
    /// Width of the pooled vector.
    pub fn dim(self, d: usize, first_k: usize) -> usize {
        match self {
            Pooling::Cls | Pooling::Mean => d,
            Pooling::Concat => d * (first_k + 2),
        }
    }

    /// Whether the strategy uses the trainable CLS projection.
    pub fn has_params(self) -> bool {
        !matches!(self, Pooling::Mean)
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Cls => "cls",
            Pooling::Mean => "mean",
            Pooling::Concat => "concat",
        })
    }
}

/// Dimension-preserving projection applied to the CLS row, plus dropout and
/// CONCAT geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolParams<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
    pub dropout: f64,
    pub first_k: usize,
}

impl<F: Real> PoolParams<F> {
    pub fn zeros(d: usize, dropout: f64, first_k: usize) -> Self {
        Self {
            w: Array2::zeros((d, d)),
            b: Array1::zeros(d),
            dropout,
            first_k,
        }
    }

    pub fn identity(d: usize, first_k: usize) -> Self {
        Self {
            w: Array2::eye(d),
            b: Array1::zeros(d),
            dropout: 0.0,
            first_k,
        }
    }

    pub fn d(&self) -> usize {
        self.b.len()
    }
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector<F> {
    pub values: Array1<F>,
    pub strategy: Pooling,
}

impl<F> PooledVector<F> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Forward intermediates needed by [`pool_backward`].
#[derive(Debug, Clone)]
pub struct PoolCache<F> {
    strategy: Pooling,
    cls_in: Array1<F>,
    activated: Array1<F>,
    dropout_scale: Option<Array1<F>>,
}

fn row<F: Real>(r: ArrayView1<'_, f32>) -> Array1<F> {
    r.mapv(|v| F::from_f32(v).expect("finite"))
}

fn cls_projection<F: Real>(
    e: &EmbeddingMatrix,
    p: &PoolParams<F>,
    mode: Mode<'_>,
) -> Result<(Array1<F>, Array1<F>, Array1<F>, Option<Array1<F>>), EncoderError> {
    let d = e.d();
    if p.w.dim() != (d, d) || p.b.len() != d {
        return Err(EncoderError::DimensionMismatch(format!(
            "pool params are {:?}, embeddings have d={d}",
            p.w.dim()
        )));
    }
    let x: Array1<F> = row(e.cls());
    let activated = (p.w.dot(&x) + &p.b).mapv(F::tanh);
    match mode {
        Mode::Eval => Ok((activated.clone(), x, activated, None)),
        Mode::Train(rng) => {
            let keep = if p.dropout >= 1.0 {
                F::zero()
            } else {
                F::from_f64_lossy(1.0 / (1.0 - p.dropout))
            };
            let scale = Array1::from_shape_fn(d, |_| {
                if p.dropout > 0.0 && rng.random::<f64>() < p.dropout {
                    F::zero()
                } else {
                    keep
                }
            });
            Ok((&activated * &scale, x, activated, Some(scale)))
        }
    }
}

/// `tanh(W * cls + b)` with inverted dropout in train mode.
pub fn pool_cls<F: Real>(
    e: &EmbeddingMatrix,
    p: &PoolParams<F>,
    mode: Mode<'_>,
) -> Result<PooledVector<F>, EncoderError> {
    pool(e, Pooling::Cls, Some(p), mode).map(|(v, _)| v)
}

/// Mean of the CLS row and the real token rows; padding is excluded.
pub fn pool_mean<F: Real>(e: &EmbeddingMatrix) -> PooledVector<F> {
    let n = e.n_tokens();
    let sum = e
        .rows()
        .slice(s![..=n, ..])
        .mapv(|v| v as f64)
        .sum_axis(Axis(0));
    PooledVector {
        values: sum.mapv(|v| F::from_f64_lossy(v / (n + 1) as f64)),
        strategy: Pooling::Mean,
    }
}

/// `[pooled CLS | tokens 1..=first_k | mean of real tokens past first_k]`.
pub fn pool_concat<F: Real>(
    e: &EmbeddingMatrix,
    p: &PoolParams<F>,
    mode: Mode<'_>,
) -> Result<PooledVector<F>, EncoderError> {
    pool(e, Pooling::Concat, Some(p), mode).map(|(v, _)| v)
}

/// Pools `e` with `strategy`; `params` is required for CLS and CONCAT.
pub fn pool<F: Real>(
    e: &EmbeddingMatrix,
    strategy: Pooling,
    params: Option<&PoolParams<F>>,
    mode: Mode<'_>,
) -> Result<(PooledVector<F>, PoolCache<F>), EncoderError> {
    let d = e.d();
    if strategy == Pooling::Mean {
        let v = pool_mean(e);
        let cache = PoolCache {
            strategy,
            cls_in: Array1::zeros(0),
            activated: Array1::zeros(0),
            dropout_scale: None,
        };
        return Ok((v, cache));
    }
    let p = params.ok_or_else(|| {
        EncoderError::DimensionMismatch(format!("{strategy} pooling needs projection parameters"))
    })?;
    let (cls, cls_in, activated, dropout_scale) = cls_projection(e, p, mode)?;
    let values = match strategy {
        Pooling::Cls => cls,
        Pooling::Concat => {
            let k = p.first_k;
            if k > e.seq() {
                return Err(EncoderError::DimensionMismatch(format!(
                    "first_k {k} exceeds seq {}",
                    e.seq()
                )));
            }
            let mut out = Array1::<F>::zeros(d * (k + 2));
            out.slice_mut(s![..d]).assign(&cls);
            let n = e.n_tokens();
            let head = n.min(k);
            for pos in 1..=head {
                out.slice_mut(s![pos * d..(pos + 1) * d]).assign(&row::<F>(e.token(pos)));
            }
            if n > k {
                let tail = e
                    .rows()
                    .slice(s![k + 1..=n, ..])
                    .mapv(|v| v as f64)
                    .sum_axis(Axis(0))
                    .mapv(|v| F::from_f64_lossy(v / (n - k) as f64));
                out.slice_mut(s![(k + 1) * d..]).assign(&tail);
            }
            out
        }
        Pooling::Mean => unreachable!(),
    };
    Ok((
        PooledVector { values, strategy },
        PoolCache {
            strategy,
            cls_in,
            activated,
            dropout_scale,
        },
    ))
}

/// Accumulates parameter gradients given `dv = dL/d(pooled)`. The encoder is
/// frozen, so nothing flows into the embeddings.
pub fn pool_backward<F: Real>(cache: &PoolCache<F>, dv: ArrayView1<'_, F>, grads: &mut PoolParams<F>) {
    if cache.strategy == Pooling::Mean {
        return;
    }
    let d = cache.activated.len();
    let mut da = dv.slice(s![..d]).to_owned();
    if let Some(scale) = &cache.dropout_scale {
        da *= scale;
    }
    da.zip_mut_with(&cache.activated, |g, &t| *g *= F::one() - t * t);
    for i in 0..d {
        let gi = da[i];
        if gi == F::zero() {
            continue;
        }
        grads
            .w
            .row_mut(i)
            .scaled_add(gi, &cache.cls_in);
    }
    grads.b += &da;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::hash_encode;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: Array2<f32>, n: usize) -> EmbeddingMatrix {
        EmbeddingMatrix::new(rows, n).unwrap()
    }

    #[test]
    fn cls_identity_and_zero_weights() {
        let e = hash_encode("alpha beta gamma", 4, 6, 9);
        let p = PoolParams::<f64>::identity(4, 2);
        let v = pool_cls(&e, &p, Mode::Eval).unwrap();
        for j in 0..4 {
            assert!((v.values[j] - (e.cls()[j] as f64).tanh()).abs() < 1e-12);
        }
        let mut z = PoolParams::<f64>::zeros(4, 0.1, 2);
        z.b = array![0.5, -0.5, 1.0, 0.0];
        let v = pool_cls(&e, &z, Mode::Eval).unwrap();
        assert_eq!(v.values, z.b.mapv(f64::tanh));
    }

    #[test]
    fn full_dropout_zeroes() {
        let e = hash_encode("alpha beta", 4, 4, 9);
        let mut p = PoolParams::<f64>::identity(4, 2);
        p.dropout = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = pool_cls(&e, &p, Mode::Train(&mut rng)).unwrap();
        assert!(v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let e = hash_encode("alpha", 4, 4, 9);
        let p = PoolParams::<f64>::identity(3, 2);
        assert!(matches!(
            pool_cls(&e, &p, Mode::Eval),
            Err(EncoderError::DimensionMismatch(_))
        ));
        let p = PoolParams::<f64>::identity(4, 5);
        assert!(matches!(
            pool_concat(&e, &p, Mode::Eval),
            Err(EncoderError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn mean_examples() {
        let e = matrix(array![[1.0, 1.0], [3.0, 1.0], [0.0, 0.0]], 1);
        assert_eq!(pool_mean::<f64>(&e).values, array![2.0, 1.0]);
        let e = matrix(array![[1.5, -1.0], [0.0, 0.0]], 0);
        assert_eq!(pool_mean::<f64>(&e).values, array![1.5, -1.0]);
    }

    #[test]
    fn concat_dims() {
        assert_eq!(Pooling::Concat.dim(768, 200), 155_136);
        assert_eq!(Pooling::Cls.dim(768, 200), 768);
    }

    #[test]
    fn concat_padding_segments() {
        let mut rows = Array2::<f32>::zeros((5, 4));
        rows.row_mut(0).fill(0.25);
        rows.row_mut(1).assign(&array![1.0, 2.0, 3.0, 4.0]);
        let e = matrix(rows, 1);
        let p = PoolParams::<f64>::identity(4, 2);
        let v = pool_concat(&e, &p, Mode::Eval).unwrap().values;
        assert_eq!(v.len(), 16);
        assert_eq!(v.slice(s![4..8]), array![1.0, 2.0, 3.0, 4.0]);
        assert!(v.slice(s![8..]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn concat_tail_is_third_token() {
        let mut rows = Array2::<f32>::zeros((5, 4));
        for r in 1..=3 {
            rows.row_mut(r).fill(r as f32);
        }
        let e = matrix(rows, 3);
        let p = PoolParams::<f64>::identity(4, 2);
        let v = pool_concat(&e, &p, Mode::Eval).unwrap().values;
        // direct recomputation: tail mean over positions 3..=3 is token 3 itself
        assert_eq!(v.slice(s![12..16]), e.token(3).mapv(f64::from));
        assert_eq!(v.slice(s![8..12]), e.token(2).mapv(f64::from));
    }
}
