use ndarray::{Array1, ArrayView1};

use super::TrainError;
use crate::numeric::{sigmoid, Real};

/// Mean binary cross-entropy over labels, computed from logits as
/// `max(s, 0) - y*s + ln(1 + exp(-|s|))`. Returns the loss and `dL/ds`.
pub fn bce_with_logits<F: Real>(s: ArrayView1<'_, F>, y: ArrayView1<'_, F>) -> Result<(F, Array1<F>), TrainError> {
    if s.len() != y.len() {
        return Err(TrainError::LengthMismatch {
            logits: s.len(),
            targets: y.len(),
        });
    }
    let n = F::from_usize(s.len().max(1)).unwrap();
    let mut loss = F::zero();
    let grad = Array1::from_shape_fn(s.len(), |i| {
        let (si, yi) = (s[i], y[i]);
        loss += si.max(F::zero()) - yi * si + (-si.abs()).exp().ln_1p();
        (sigmoid(si) - yi) / n
    });
    Ok((loss / n, grad))
}

/// Cross-entropy of `gold` under a softmax restricted to `mask`. The
/// gradient is zero outside the mask.
pub fn masked_ce<F: Real>(logits: ArrayView1<'_, F>, mask: &[bool], gold: usize) -> Result<(F, Array1<F>), TrainError> {
    if logits.len() != mask.len() {
        return Err(TrainError::LengthMismatch {
            logits: logits.len(),
            targets: mask.len(),
        });
    }
    if !mask.get(gold).copied().unwrap_or(false) {
        return Err(TrainError::GoldMasked(gold));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for (&l, &m) in logits.iter().zip(mask) {
        if m {
            z += (l - max).exp();
        }
    }
    let log_z = max + z.ln();
    let mut grad = Array1::zeros(logits.len());
    for (i, (&l, &m)) in logits.iter().zip(mask).enumerate() {
        if m {
            grad[i] = (l - log_z).exp();
        }
    }
    grad[gold] -= F::one();
    Ok((log_z - logits[gold], grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bce_at_zero_is_ln2() {
        let (l, g) = bce_with_logits(array![0.0f64, 0.0].view(), array![1.0, 0.0].view()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g, array![-0.25, 0.25]);
    }

    #[test]
    fn bce_is_stable() {
        let (l, _) = bce_with_logits(array![40.0f32].view(), array![1.0].view()).unwrap();
        assert!(l.is_finite() && l < 1e-12);
        let (l, _) = bce_with_logits(array![-1000.0f64].view(), array![1.0].view()).unwrap();
        assert_eq!(l, 1000.0);
        assert!(bce_with_logits(array![0.0f64].view(), array![1.0, 0.0].view()).is_err());
    }

    #[test]
    fn bce_matches_finite_differences() {
        let s = array![0.3f64, -1.2, 2.5, 0.0, -0.4];
        let y = array![1.0, 0.0, 1.0, 0.0, 0.0];
        let (_, g) = bce_with_logits(s.view(), y.view()).unwrap();
        for i in 0..s.len() {
            let h = 1e-4;
            let (mut a, mut b) = (s.clone(), s.clone());
            a[i] += h;
            b[i] -= h;
            let num = (bce_with_logits(a.view(), y.view()).unwrap().0
                - bce_with_logits(b.view(), y.view()).unwrap().0)
                / (2.0 * h);
            assert!((num - g[i]).abs() / num.abs().max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn masked_ce_cases() {
        let (l, g) = masked_ce(array![3.0f64, -1.0, 7.0].view(), &[false, true, false], 1).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, array![0.0, 0.0, 0.0]);

        let (l, _) = masked_ce(array![0.5f64, 0.5, 0.5, 0.5, 9.0].view(), &[true, true, true, true, false], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        assert!(matches!(
            masked_ce(array![0.0f64, 0.0].view(), &[true, false], 1),
            Err(TrainError::GoldMasked(1))
        ));
    }

    #[test]
    fn masked_ce_matches_finite_differences() {
        let s = array![0.3f64, -1.2, 2.5, 0.0, -0.4];
        let mask = [true, false, true, true, false];
        let (_, g) = masked_ce(s.view(), &mask, 3).unwrap();
        for i in 0..s.len() {
            let h = 1e-4;
            let (mut a, mut b) = (s.clone(), s.clone());
            a[i] += h;
            b[i] -= h;
            let num = (masked_ce(a.view(), &mask, 3).unwrap().0 - masked_ce(b.view(), &mask, 3).unwrap().0) / (2.0 * h);
            if mask[i] {
                assert!((num - g[i]).abs() / num.abs().max(1e-8) < 1e-4);
            } else {
                assert_eq!(g[i], 0.0);
                assert!(num.abs() < 1e-12);
            }
        }
    }
}
