//! GRU sequential decoder.
//!
//! At each step the cell sees `[pooled ; e_prev]`, where `e_prev` is the row
//! of the classifier matrix for the previously chosen label (a trainable
//! initial embedding at the first step). Logits are masked to the children
//! of the previous label.

use ndarray::{s, Array1, Array2, ArrayView1};

use super::HeadError;
use crate::numeric::{masked_argmax, sigmoid, Real};
use crate::ontology::{LabelId, Ontology};

/// Cho-style GRU cell weights. `W*` act on the input, `U*` on the previous
/// hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<F> {
    pub wz: Array2<F>,
    pub wr: Array2<F>,
    pub wh: Array2<F>,
    pub uz: Array2<F>,
    pub ur: Array2<F>,
    pub uh: Array2<F>,
    pub bz: Array1<F>,
    pub br: Array1<F>,
    pub bh: Array1<F>,
}

impl<F: Real> GruParams<F> {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            wz: Array2::zeros((hidden, input)),
            wr: Array2::zeros((hidden, input)),
            wh: Array2::zeros((hidden, input)),
            uz: Array2::zeros((hidden, hidden)),
            ur: Array2::zeros((hidden, hidden)),
            uh: Array2::zeros((hidden, hidden)),
            bz: Array1::zeros(hidden),
            br: Array1::zeros(hidden),
            bh: Array1::zeros(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.bz.len()
    }

    pub fn input(&self) -> usize {
        self.wz.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct GruCache<F> {
    x: Array1<F>,
    h_prev: Array1<F>,
    z: Array1<F>,
    r: Array1<F>,
    candidate: Array1<F>,
}

fn check_dims<F: Real>(x: &ArrayView1<'_, F>, h_prev: &ArrayView1<'_, F>, g: &GruParams<F>) -> Result<(), HeadError> {
    if x.len() != g.input() || h_prev.len() != g.hidden() {
        return Err(HeadError::DimensionMismatch(format!(
            "gru cell expects input {} and hidden {}, got {} and {}",
            g.input(),
            g.hidden(),
            x.len(),
            h_prev.len()
        )));
    }
    Ok(())
}

pub fn gru_forward<F: Real>(
    x: ArrayView1<'_, F>,
    h_prev: ArrayView1<'_, F>,
    g: &GruParams<F>,
) -> Result<(Array1<F>, GruCache<F>), HeadError> {
    check_dims(&x, &h_prev, g)?;
    let z = (g.wz.dot(&x) + g.uz.dot(&h_prev) + &g.bz).mapv(sigmoid);
    let r = (g.wr.dot(&x) + g.ur.dot(&h_prev) + &g.br).mapv(sigmoid);
    let gated = &r * &h_prev;
    let candidate = (g.wh.dot(&x) + g.uh.dot(&gated) + &g.bh).mapv(F::tanh);
    let h = Array1::from_shape_fn(z.len(), |i| {
        (F::one() - z[i]) * h_prev[i] + z[i] * candidate[i]
    });
    let cache = GruCache {
        x: x.to_owned(),
        h_prev: h_prev.to_owned(),
        z,
        r,
        candidate,
    };
    Ok((h, cache))
}

/// One GRU step.
pub fn gru_cell<F: Real>(
    x: ArrayView1<'_, F>,
    h_prev: ArrayView1<'_, F>,
    g: &GruParams<F>,
) -> Result<Array1<F>, HeadError> {
    gru_forward(x, h_prev, g).map(|(h, _)| h)
}

fn outer_add<F: Real>(m: &mut Array2<F>, col: &Array1<F>, row: &Array1<F>) {
    for (i, &c) in col.iter().enumerate() {
        if c != F::zero() {
            m.row_mut(i).scaled_add(c, row);
        }
    }
}

/// Backward through one cell. Accumulates weight gradients into `grads` and
/// returns `(dx, dh_prev)`.
pub fn gru_backward<F: Real>(
    cache: &GruCache<F>,
    dh: ArrayView1<'_, F>,
    g: &GruParams<F>,
    grads: &mut GruParams<F>,
) -> (Array1<F>, Array1<F>) {
    let one = F::one();
    let GruCache {
        x,
        h_prev,
        z,
        r,
        candidate,
    } = cache;
    let n = z.len();

    let mut dh_prev = Array1::from_shape_fn(n, |i| dh[i] * (one - z[i]));
    let da_z = Array1::from_shape_fn(n, |i| dh[i] * (candidate[i] - h_prev[i]) * z[i] * (one - z[i]));
    let da_h = Array1::from_shape_fn(n, |i| dh[i] * z[i] * (one - candidate[i] * candidate[i]));

    let gated = r * h_prev;
    let d_gated = g.uh.t().dot(&da_h);
    let da_r = Array1::from_shape_fn(n, |i| d_gated[i] * h_prev[i] * r[i] * (one - r[i]));
    dh_prev += &(&d_gated * r);

    outer_add(&mut grads.wz, &da_z, x);
    outer_add(&mut grads.wr, &da_r, x);
    outer_add(&mut grads.wh, &da_h, x);
    outer_add(&mut grads.uz, &da_z, h_prev);
    outer_add(&mut grads.ur, &da_r, h_prev);
    outer_add(&mut grads.uh, &da_h, &gated);
    grads.bz += &da_z;
    grads.br += &da_r;
    grads.bh += &da_h;

    let dx = g.wz.t().dot(&da_z) + g.wr.t().dot(&da_r) + g.wh.t().dot(&da_h);
    dh_prev += &g.uz.t().dot(&da_z);
    dh_prev += &g.ur.t().dot(&da_r);
    (dx, dh_prev)
}

/// Width of the cell input: the pooled vector followed by the previous
/// label embedding.
pub fn input_width(pooled_dim: usize, hidden: usize) -> usize {
    pooled_dim + hidden
}

/// GRU cell plus the label classifier whose rows double as label embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GruHead<F> {
    pub gru: GruParams<F>,
    pub c: Array2<F>,
    pub cb: Array1<F>,
    pub e_init: Array1<F>,
}

/// A decoded root-to-leaf chain of full label indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodePath {
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
}

impl DecodePath {
    pub fn ids(&self, o: &Ontology) -> Vec<LabelId> {
        self.labels.iter().map(|&l| o.label(l).clone()).collect()
    }

    pub fn leaf(&self) -> usize {
        *self.labels.last().expect("non-empty path")
    }
}

#[derive(Debug, Clone)]
pub struct GruStep<F> {
    pub logits: Array1<F>,
    pub mask: Vec<bool>,
    pub chosen: usize,
    hidden: Array1<F>,
    cache: GruCache<F>,
}

/// Per-step record of a decode or teacher-forced pass.
#[derive(Debug, Clone)]
pub struct GruTrace<F> {
    pub steps: Vec<GruStep<F>>,
}

impl<F: Real> GruTrace<F> {
    pub fn path(&self) -> DecodePath {
        DecodePath {
            labels: self.steps.iter().map(|s| s.chosen).collect(),
            scores: self.steps.iter().map(|s| s.logits[s.chosen].to_f64_lossy()).collect(),
        }
    }
}

impl<F: Real> GruHead<F> {
    pub fn zeros(pooled_dim: usize, hidden: usize, n_labels: usize) -> Self {
        Self {
            gru: GruParams::zeros(hidden, input_width(pooled_dim, hidden)),
            c: Array2::zeros((n_labels, hidden)),
            cb: Array1::zeros(n_labels),
            e_init: Array1::zeros(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden()
    }

    /// Width of the pooled vector this head consumes.
    pub fn pooled_dim(&self) -> usize {
        self.gru.input() - self.hidden()
    }

    fn run(
        &self,
        v: ArrayView1<'_, F>,
        o: &Ontology,
        mut choose: impl FnMut(usize, &Array1<F>, &[bool]) -> Result<Option<usize>, HeadError>,
    ) -> Result<GruTrace<F>, HeadError> {
        let h = self.hidden();
        if v.len() != self.pooled_dim() {
            return Err(HeadError::DimensionMismatch(format!(
                "pooled vector has {} entries, gru head expects {}",
                v.len(),
                self.pooled_dim()
            )));
        }
        if self.c.nrows() != o.len() {
            return Err(HeadError::DimensionMismatch(format!(
                "classifier has {} rows, ontology has {} labels",
                self.c.nrows(),
                o.len()
            )));
        }
        let dim = v.len();
        let mut x = Array1::<F>::zeros(dim + h);
        x.slice_mut(s![..dim]).assign(&v);
        x.slice_mut(s![dim..]).assign(&self.e_init);
        let mut hidden = Array1::<F>::zeros(h);
        let mut prev: Option<usize> = None;
        let mut steps = Vec::new();
        for t in 0..o.max_depth() {
            let mask = o.child_mask_idx(prev);
            let (h_t, cache) = gru_forward(x.view(), hidden.view(), &self.gru)?;
            let logits = self.c.dot(&h_t) + &self.cb;
            let Some(chosen) = choose(t, &logits, &mask)? else {
                break;
            };
            steps.push(GruStep {
                logits,
                mask,
                chosen,
                hidden: h_t.clone(),
                cache,
            });
            if o.is_leaf(chosen) {
                break;
            }
            x.slice_mut(s![dim..]).assign(&self.c.row(chosen));
            hidden = h_t;
            prev = Some(chosen);
        }
        Ok(GruTrace { steps })
    }

    /// Greedy masked decode; the returned trace carries the per-step logits.
    pub fn decode_trace(&self, v: ArrayView1<'_, F>, o: &Ontology) -> Result<GruTrace<F>, HeadError> {
        let trace = self.run(v, o, |_, logits, mask| {
            masked_argmax(logits.view(), mask).map(Some).ok_or_else(|| {
                HeadError::DeadEnd("start".into())
            })
        })?;
        let path = trace.path();
        match path.labels.last() {
            Some(&last) if o.is_leaf(last) => Ok(trace),
            Some(&last) => Err(HeadError::DeadEnd(o.label(last).to_string())),
            None => Err(HeadError::DeadEnd("start".into())),
        }
    }

    pub fn decode(&self, v: ArrayView1<'_, F>, o: &Ontology) -> Result<DecodePath, HeadError> {
        self.decode_trace(v, o).map(|t| t.path())
    }

    /// Teacher-forced pass along `gold` (root to leaf, full indices).
    pub fn teacher_trace(
        &self,
        v: ArrayView1<'_, F>,
        o: &Ontology,
        gold: &[usize],
    ) -> Result<GruTrace<F>, HeadError> {
        validate_path(o, gold)?;
        let trace = self.run(v, o, |t, _, _| Ok(gold.get(t).copied()))?;
        debug_assert_eq!(trace.steps.len(), gold.len());
        Ok(trace)
    }

    /// Per-step `(logits, mask)` pairs under teacher forcing.
    pub fn teacher_logits(
        &self,
        v: ArrayView1<'_, F>,
        o: &Ontology,
        gold: &[usize],
    ) -> Result<Vec<(Array1<F>, Vec<bool>)>, HeadError> {
        Ok(self
            .teacher_trace(v, o, gold)?
            .steps
            .into_iter()
            .map(|s| (s.logits, s.mask))
            .collect())
    }

    /// Backpropagates per-step logit gradients through the unrolled decoder.
    /// Gradients flow into `C` both as classifier and as label embedding.
    pub fn backward(&self, trace: &GruTrace<F>, dlogits: &[Array1<F>], grads: &mut Self) -> Array1<F> {
        assert_eq!(trace.steps.len(), dlogits.len());
        let h = self.hidden();
        let dim = self.pooled_dim();
        let mut dv = Array1::<F>::zeros(dim);
        let mut dh_carry = Array1::<F>::zeros(h);
        for t in (0..trace.steps.len()).rev() {
            let step = &trace.steps[t];
            let dl = &dlogits[t];
            for (i, &g) in dl.iter().enumerate() {
                if g != F::zero() {
                    grads.c.row_mut(i).scaled_add(g, &step.hidden);
                }
            }
            grads.cb += dl;
            let dh = self.c.t().dot(dl) + &dh_carry;
            let (dx, dh_prev) = gru_backward(&step.cache, dh.view(), &self.gru, &mut grads.gru);
            dv += &dx.slice(s![..dim]);
            let de = dx.slice(s![dim..]);
            if t == 0 {
                grads.e_init += &de;
            } else {
                let prev = trace.steps[t - 1].chosen;
                grads.c.row_mut(prev).scaled_add(F::one(), &de);
            }
            dh_carry = dh_prev;
        }
        dv
    }
}

/// Checks that `path` starts at a root, descends parent to child and ends
/// at a leaf.
pub fn validate_path(o: &Ontology, path: &[usize]) -> Result<(), HeadError> {
    let fail = |msg: String| Err(HeadError::InvalidPath(msg));
    let Some(&first) = path.first() else {
        return fail("empty path".into());
    };
    if first >= o.len() || o.parent_of(first).is_some() {
        return fail(format!("path must start at a depth-1 label, got index {first}"));
    }
    for w in path.windows(2) {
        if w[1] >= o.len() || o.parent_of(w[1]) != Some(w[0]) {
            return fail(format!("index {} is not a child of {}", w[1], o.label(w[0])));
        }
    }
    let last = *path.last().unwrap();
    if !o.is_leaf(last) {
        return fail(format!("path ends at internal label {}", o.label(last)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_params(hidden: usize, input: usize, seed: u64) -> GruParams<f64> {
        let mut state = seed;
        let mut next = || {
            state = crate::hashing::splitmix64(state);
            (state as f64 / u64::MAX as f64) - 0.5
        };
        let mut g = GruParams::zeros(hidden, input);
        for m in [&mut g.wz, &mut g.wr, &mut g.wh, &mut g.uz, &mut g.ur, &mut g.uh] {
            m.mapv_inplace(|_| next());
        }
        for b in [&mut g.bz, &mut g.br, &mut g.bh] {
            b.mapv_inplace(|_| next());
        }
        g
    }

    #[test]
    fn zero_weights_halve_state() {
        let g = GruParams::<f64>::zeros(3, 2);
        let h = gru_cell(array![1.0, -1.0].view(), array![0.4, -2.0, 1.0].view(), &g).unwrap();
        assert_eq!(h, array![0.2, -1.0, 0.5]);
    }

    #[test]
    fn zero_state_zero_candidate() {
        let mut g = small_params(3, 2, 5);
        g.wh.fill(0.0);
        g.bh.fill(0.0);
        let h = gru_cell(array![0.3, 0.9].view(), Array1::zeros(3).view(), &g).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_loop() {
        let (hn, inn) = (3, 4);
        let g = small_params(hn, inn, 17);
        let x = array![0.2, -0.7, 0.5, 1.1];
        let hp = array![0.1, -0.3, 0.8];
        let got = gru_cell(x.view(), hp.view(), &g).unwrap();
        let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
        let mut z = vec![0.0; hn];
        let mut r = vec![0.0; hn];
        for i in 0..hn {
            let (mut az, mut ar) = (g.bz[i], g.br[i]);
            for j in 0..inn {
                az += g.wz[[i, j]] * x[j];
                ar += g.wr[[i, j]] * x[j];
            }
            for j in 0..hn {
                az += g.uz[[i, j]] * hp[j];
                ar += g.ur[[i, j]] * hp[j];
            }
            z[i] = sig(az);
            r[i] = sig(ar);
        }
        for i in 0..hn {
            let mut ah = g.bh[i];
            for j in 0..inn {
                ah += g.wh[[i, j]] * x[j];
            }
            for j in 0..hn {
                ah += g.uh[[i, j]] * r[j] * hp[j];
            }
            let expected = (1.0 - z[i]) * hp[i] + z[i] * ah.tanh();
            assert!((got[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_checks() {
        let g = GruParams::<f64>::zeros(3, 2);
        assert!(gru_cell(array![1.0].view(), Array1::zeros(3).view(), &g).is_err());
    }

    #[test]
    fn forced_chain() {
        let o = Ontology::parse("1\ta\n1.1\tb\n1.1.1\tc\n").unwrap();
        let mut head = GruHead::<f64>::zeros(2, 3, o.len());
        head.gru = small_params(3, 5, 3);
        head.c = Array2::from_shape_fn((3, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let path = head.decode(array![0.5, -0.5].view(), &o).unwrap();
        assert_eq!(path.labels, vec![0, 1, 2]);
    }

    #[test]
    fn input_widths() {
        use crate::encoder::Pooling;
        let h = 768;
        assert_eq!(Pooling::Cls.dim(768, 200) + h, 1536);
        assert_eq!(Pooling::Concat.dim(768, 200) + h, 155_904);
    }

    #[test]
    fn invalid_paths() {
        let o = Ontology::parse("1\ta\n1.1\tb\n1.2\tc\n2\td\n").unwrap();
        assert!(validate_path(&o, &[]).is_err());
        assert!(validate_path(&o, &[1]).is_err());
        assert!(validate_path(&o, &[0]).is_err());
        assert!(validate_path(&o, &[3, 1]).is_err());
        assert!(validate_path(&o, &[0, 2]).is_ok());
        assert!(validate_path(&o, &[3]).is_ok());
    }
}
