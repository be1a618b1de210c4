//! Scalar abstraction so the same forward/backward code runs in `f32` for
//! training and `f64` for gradient checking.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, ArrayView1, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax<F: Real>(xs: ArrayView1<'_, F>) -> Option<usize> {
    let mut best: Option<(usize, F)> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some((_, b)) if !(x > b) => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Argmax restricted to `mask`; ties resolve to the lowest index.
pub fn masked_argmax<F: Real>(xs: ArrayView1<'_, F>, mask: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, F)> = None;
    for (i, (&x, &m)) in xs.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        match best {
            Some((_, b)) if !(x > b) => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn cast_vec<A: Real, B: Real>(v: &Array1<A>) -> Array1<B> {
    v.mapv(|x| B::from_f64_lossy(x.to_f64_lossy()))
}
