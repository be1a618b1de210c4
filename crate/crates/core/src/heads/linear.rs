use ndarray::{Array1, Array2, ArrayView1};

use super::HeadError;
use crate::numeric::Real;

/// `s = W v + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Real> LinearHead<F> {
    pub fn zeros(n_out: usize, dim: usize) -> Self {
        Self {
            w: Array2::zeros((n_out, dim)),
            b: Array1::zeros(n_out),
        }
    }

    pub fn n_out(&self) -> usize {
        self.b.len()
    }

    pub fn forward(&self, v: ArrayView1<'_, F>) -> Result<Array1<F>, HeadError> {
        if v.len() != self.w.ncols() {
            return Err(HeadError::DimensionMismatch(format!(
                "input has {} entries, head expects {}",
                v.len(),
                self.w.ncols()
            )));
        }
        Ok(self.w.dot(&v) + &self.b)
    }

    /// Accumulates `dW`, `db` into `grads` and returns `dv`.
    pub fn backward(&self, v: ArrayView1<'_, F>, ds: ArrayView1<'_, F>, grads: &mut Self) -> Array1<F> {
        for (i, &g) in ds.iter().enumerate() {
            if g != F::zero() {
                grads.w.row_mut(i).scaled_add(g, &v);
            }
        }
        grads.b += &ds;
        self.w.t().dot(&ds)
    }
}
