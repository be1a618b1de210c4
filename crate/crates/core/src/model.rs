//! A pooling strategy plus one classifier head, with the per-sample loss and
//! its gradient.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decision::ScoreSpace;
use crate::encoder::{pool, pool_backward, EmbeddingMatrix, Mode, PoolParams, Pooling};
use crate::heads::{DecodePath, GruHead, LinearHead};
use crate::numeric::Real;
use crate::ontology::Ontology;
use crate::trainer::{bce_with_logits, masked_ce, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    LinearLeaf,
    MultiLevel,
    Gru,
}

impl HeadKind {
    /// Score space of the linear heads; `None` for the sequential decoder.
    pub fn score_space(self) -> Option<ScoreSpace> {
        match self {
            HeadKind::LinearLeaf => Some(ScoreSpace::Leaves),
            HeadKind::MultiLevel => Some(ScoreSpace::AllLabels),
            HeadKind::Gru => None,
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::LinearLeaf => "linear-leaf",
            HeadKind::MultiLevel => "multi-level",
            HeadKind::Gru => "gru",
        })
    }
}

/// Geometry shared by pooling and heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d: usize,
    pub seq: usize,
    pub first_k: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d: 768,
            seq: 511,
            first_k: 200,
            hidden: 768,
            dropout: 0.1,
        }
    }
}

impl ModelDims {
    pub fn pooled_dim(&self, pooling: Pooling) -> usize {
        pooling.dim(self.d, self.first_k)
    }

    /// Input width of the GRU cell under `pooling`.
    pub fn gru_input(&self, pooling: Pooling) -> usize {
        crate::heads::input_width(self.pooled_dim(pooling), self.hidden)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head<F> {
    Linear(LinearHead<F>),
    Gru(GruHead<F>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub kind: HeadKind,
    pub pooling: Pooling,
    pub pool: PoolParams<F>,
    pub head: Head<F>,
}

/// What a forward pass yields.
#[derive(Debug, Clone, PartialEq)]
pub enum Output<F> {
    Scores(Array1<F>),
    Path(DecodePath),
}

fn glorot<F: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<F> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| F::from_f64_lossy(rng.random_range(-a..a)))
}

impl<F: Real> Model<F> {
    /// All-zero parameters with the geometry of `dims`.
    pub fn zeros(kind: HeadKind, pooling: Pooling, dims: &ModelDims, o: &Ontology) -> Self {
        let dim = pooling.dim(dims.d, dims.first_k);
        let head = match kind {
            HeadKind::LinearLeaf => Head::Linear(LinearHead::zeros(o.n_leaves(), dim)),
            HeadKind::MultiLevel => Head::Linear(LinearHead::zeros(o.len(), dim)),
            HeadKind::Gru => Head::Gru(GruHead::zeros(dim, dims.hidden, o.len())),
        };
        Self {
            kind,
            pooling,
            pool: PoolParams::zeros(dims.d, dims.dropout, dims.first_k),
            head,
        }
    }

    /// Glorot-uniform weights, zero biases, and an initial label embedding
    /// drawn from U(-0.01, 0.01).
    pub fn init(kind: HeadKind, pooling: Pooling, dims: &ModelDims, o: &Ontology, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(kind, pooling, dims, o);
        if pooling.has_params() {
            m.pool.w = glorot(&mut rng, dims.d, dims.d);
        }
        match &mut m.head {
            Head::Linear(h) => h.w = glorot(&mut rng, h.w.nrows(), h.w.ncols()),
            Head::Gru(h) => {
                let (hsz, input) = (h.hidden(), h.gru.input());
                h.gru.wz = glorot(&mut rng, hsz, input);
                h.gru.wr = glorot(&mut rng, hsz, input);
                h.gru.wh = glorot(&mut rng, hsz, input);
                h.gru.uz = glorot(&mut rng, hsz, hsz);
                h.gru.ur = glorot(&mut rng, hsz, hsz);
                h.gru.uh = glorot(&mut rng, hsz, hsz);
                h.c = glorot(&mut rng, h.c.nrows(), hsz);
                h.e_init = Array1::from_shape_fn(hsz, |_| F::from_f64_lossy(rng.random_range(-0.01..0.01)));
            }
        }
        m
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    /// Named trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, F>)> {
        let mut out = vec![
            ("pool.w", self.pool.w.view().into_dyn()),
            ("pool.b", self.pool.b.view().into_dyn()),
        ];
        match &self.head {
            Head::Linear(h) => {
                out.push(("head.w", h.w.view().into_dyn()));
                out.push(("head.b", h.b.view().into_dyn()));
            }
            Head::Gru(h) => {
                let g = &h.gru;
                out.extend([
                    ("gru.wz", g.wz.view().into_dyn()),
                    ("gru.wr", g.wr.view().into_dyn()),
                    ("gru.wh", g.wh.view().into_dyn()),
                    ("gru.uz", g.uz.view().into_dyn()),
                    ("gru.ur", g.ur.view().into_dyn()),
                    ("gru.uh", g.uh.view().into_dyn()),
                    ("gru.bz", g.bz.view().into_dyn()),
                    ("gru.br", g.br.view().into_dyn()),
                    ("gru.bh", g.bh.view().into_dyn()),
                    ("head.c", h.c.view().into_dyn()),
                    ("head.cb", h.cb.view().into_dyn()),
                    ("head.e_init", h.e_init.view().into_dyn()),
                ]);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, F>)> {
        let mut out = vec![
            ("pool.w", self.pool.w.view_mut().into_dyn()),
            ("pool.b", self.pool.b.view_mut().into_dyn()),
        ];
        match &mut self.head {
            Head::Linear(h) => {
                out.push(("head.w", h.w.view_mut().into_dyn()));
                out.push(("head.b", h.b.view_mut().into_dyn()));
            }
            Head::Gru(h) => {
                let g = &mut h.gru;
                out.extend([
                    ("gru.wz", g.wz.view_mut().into_dyn()),
                    ("gru.wr", g.wr.view_mut().into_dyn()),
                    ("gru.wh", g.wh.view_mut().into_dyn()),
                    ("gru.uz", g.uz.view_mut().into_dyn()),
                    ("gru.ur", g.ur.view_mut().into_dyn()),
                    ("gru.uh", g.uh.view_mut().into_dyn()),
                    ("gru.bz", g.bz.view_mut().into_dyn()),
                    ("gru.br", g.br.view_mut().into_dyn()),
                    ("gru.bh", g.bh.view_mut().into_dyn()),
                ]);
                out.push(("head.c", h.c.view_mut().into_dyn()));
                out.push(("head.cb", h.cb.view_mut().into_dyn()));
                out.push(("head.e_init", h.e_init.view_mut().into_dyn()));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Eval-mode forward pass.
    pub fn forward(&self, e: &EmbeddingMatrix, o: &Ontology) -> Result<Output<F>, TrainError> {
        let (v, _) = pool(e, self.pooling, Some(&self.pool), Mode::Eval)?;
        match &self.head {
            Head::Linear(h) => Ok(Output::Scores(h.forward(v.values.view())?)),
            Head::Gru(h) => Ok(Output::Path(h.decode(v.values.view(), o)?)),
        }
    }

    /// Loss of one sample; gradients (times `scale`) are added to `grads`.
    ///
    /// `gold` holds full indices of leaf labels. Linear heads use binary
    /// cross-entropy over leaf targets (leaf head) or ancestor-expanded
    /// targets (multi-level head); the GRU head sums the masked
    /// cross-entropy of every step of every gold path under teacher forcing.
    pub fn loss_and_grad(
        &self,
        e: &EmbeddingMatrix,
        gold: &BTreeSet<usize>,
        o: &Ontology,
        mode: Mode<'_>,
        scale: F,
        grads: &mut Self,
    ) -> Result<F, TrainError> {
        let (v, cache) = pool(e, self.pooling, Some(&self.pool), mode)?;
        let (loss, dv) = match (&self.head, &mut grads.head) {
            (Head::Linear(h), Head::Linear(gh)) => {
                let s = h.forward(v.values.view())?;
                let targets = self.targets(gold, o);
                let (loss, ds) = bce_with_logits(s.view(), targets.view())?;
                let ds = ds * scale;
                (loss, h.backward(v.values.view(), ds.view(), gh))
            }
            (Head::Gru(h), Head::Gru(gh)) => {
                let mut loss = F::zero();
                let mut dv = Array1::<F>::zeros(v.dim());
                for &leaf in gold {
                    let path = o.ancestor_indices(leaf);
                    let trace = h.teacher_trace(v.values.view(), o, &path)?;
                    let mut dlogits = Vec::with_capacity(path.len());
                    for (step, &g) in trace.steps.iter().zip(&path) {
                        let (l, dl) = masked_ce(step.logits.view(), &step.mask, g)?;
                        loss += l;
                        dlogits.push(dl * scale);
                    }
                    dv += &h.backward(&trace, &dlogits, gh);
                }
                (loss, dv)
            }
            _ => panic!("gradient buffer does not match model head"),
        };
        pool_backward(&cache, dv.view(), &mut grads.pool);
        Ok(loss)
    }

    /// Binary targets in the head's score space.
    pub fn targets(&self, gold: &BTreeSet<usize>, o: &Ontology) -> Array1<F> {
        match self.kind {
            HeadKind::LinearLeaf => {
                let mut y = Array1::zeros(o.n_leaves());
                for &g in gold {
                    y[o.full_to_leaf(g).expect("gold labels are leaves")] = F::one();
                }
                y
            }
            HeadKind::MultiLevel => {
                let mut y = Array1::zeros(o.len());
                for l in o.expand_indices(gold) {
                    y[l] = F::one();
                }
                y
            }
            HeadKind::Gru => Array1::zeros(0),
        }
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<G: Real>(&self) -> Model<G> {
        let c2 = |a: &Array2<F>| a.mapv(|x| G::from_f64_lossy(x.to_f64_lossy()));
        let c1 = |a: &Array1<F>| a.mapv(|x| G::from_f64_lossy(x.to_f64_lossy()));
        let pool = PoolParams {
            w: c2(&self.pool.w),
            b: c1(&self.pool.b),
            dropout: self.pool.dropout,
            first_k: self.pool.first_k,
        };
        let head = match &self.head {
            Head::Linear(h) => Head::Linear(LinearHead { w: c2(&h.w), b: c1(&h.b) }),
            Head::Gru(h) => {
                let g = &h.gru;
                Head::Gru(GruHead {
                    gru: crate::heads::GruParams {
                        wz: c2(&g.wz),
                        wr: c2(&g.wr),
                        wh: c2(&g.wh),
                        uz: c2(&g.uz),
                        ur: c2(&g.ur),
                        uh: c2(&g.uh),
                        bz: c1(&g.bz),
                        br: c1(&g.br),
                        bh: c1(&g.bh),
                    },
                    c: c2(&h.c),
                    cb: c1(&h.cb),
                    e_init: c1(&h.e_init),
                })
            }
        };
        Model {
            kind: self.kind,
            pooling: self.pooling,
            pool,
            head,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            d: 4,
            seq: 6,
            first_k: 2,
            hidden: 3,
            dropout: 0.1,
        }
    }

    #[test]
    fn multi_level_targets_count_ancestors() {
        let o = Ontology::ene();
        let m = Model::<f32>::init(HeadKind::MultiLevel, Pooling::Cls, &dims(), &o, 1);
        let fungus = o.index_of(&"1.10.4.1".parse().unwrap()).unwrap();
        let y = m.targets(&[fungus].into(), &o);
        assert_eq!(y.len(), 268);
        assert_eq!(y.sum(), 4.0);
        let leaf = Model::<f32>::init(HeadKind::LinearLeaf, Pooling::Cls, &dims(), &o, 1);
        let y = leaf.targets(&[fungus].into(), &o);
        assert_eq!((y.len(), y.sum()), (193, 1.0));
    }

    #[test]
    fn init_is_seeded() {
        let o = Ontology::ene();
        let a = Model::<f32>::init(HeadKind::Gru, Pooling::Concat, &dims(), &o, 5);
        let b = Model::<f32>::init(HeadKind::Gru, Pooling::Concat, &dims(), &o, 5);
        assert_eq!(a, b);
        let Head::Gru(h) = &a.head else { unreachable!() };
        assert!(h.e_init.iter().all(|v| v.abs() <= 0.01));
        assert!(h.gru.bz.iter().all(|&v| v == 0.0));
        assert_eq!(h.gru.input(), 4 * 4 + 3);
    }

    #[test]
    fn zeros_like_and_names() {
        let o = Ontology::ene();
        let m = Model::<f32>::init(HeadKind::LinearLeaf, Pooling::Mean, &dims(), &o, 5);
        let z = m.zeros_like();
        assert!(z.tensors().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
        let names: Vec<_> = m.tensors().iter().map(|(n, _)| *n).collect();
        assert_eq!(names, ["pool.w", "pool.b", "head.w", "head.b"]);
    }
}
