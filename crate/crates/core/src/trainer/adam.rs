use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use super::TrainError;
use crate::numeric::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (ArrayD::zeros(s), ArrayD::zeros(s)))
            .unzip();
        Self { m, v, t: 0 }
    }
}

/// One bias-corrected Adam update (no weight decay).
pub fn adam_step<F: Real>(
    params: &mut [ArrayViewMutD<'_, F>],
    grads: &[ArrayViewD<'_, F>],
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(TrainError::ShapeMismatch(format!(
                "tensor {i}: parameter {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient(i));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = F::from_f64_lossy(1.0 - BETA1.powi(t));
    let c2 = F::from_f64_lossy(1.0 - BETA2.powi(t));
    let (b1, b2) = (F::from_f64_lossy(BETA1), F::from_f64_lossy(BETA2));
    let (eps, lr) = (F::from_f64_lossy(EPSILON), F::from_f64_lossy(lr));
    let one = F::one();
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD, IxDyn};

    fn scalar(x: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(&[1]), x)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(1.0);
        let g = scalar(-3.0);
        let mut st = AdamState::<f64>::new([&[1usize][..]]);
        adam_step(&mut [p.view_mut()], &[g.view()], &mut st, 0.01).unwrap();
        assert!((p[[0]] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = arr1(&[0.5f64, -2.0]).into_dyn();
        let g = ArrayD::<f64>::zeros(IxDyn(&[2]));
        let mut st = AdamState::<f64>::new([&[2usize][..]]);
        for _ in 0..5 {
            adam_step(&mut [p.view_mut()], &[g.view()], &mut st, 0.1).unwrap();
        }
        assert_eq!(p, arr1(&[0.5, -2.0]).into_dyn());
    }

    #[test]
    fn three_step_trace() {
        // hand-rolled scalar Adam
        let gs = [0.5, -0.2, 0.8];
        let lr = 0.05;
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for (k, g) in gs.iter().enumerate() {
            let t = (k + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
        }
        let mut p = scalar(1.0);
        let mut st = AdamState::<f64>::new([&[1usize][..]]);
        for g in gs {
            adam_step(&mut [p.view_mut()], &[scalar(g).view()], &mut st, lr).unwrap();
        }
        assert!((p[[0]] - x).abs() < 1e-12);
        assert_eq!(st.t, 3);
    }

    #[test]
    fn errors() {
        let mut p = scalar(1.0);
        let mut st = AdamState::<f64>::new([&[1usize][..]]);
        let bad = ArrayD::<f64>::zeros(IxDyn(&[2]));
        assert!(matches!(
            adam_step(&mut [p.view_mut()], &[bad.view()], &mut st, 0.1),
            Err(TrainError::ShapeMismatch(_))
        ));
        assert!(matches!(
            adam_step(&mut [p.view_mut()], &[scalar(f64::NAN).view()], &mut st, 0.1),
            Err(TrainError::NonFiniteGradient(0))
        ));
        assert_eq!(st.t, 0);
    }
}
