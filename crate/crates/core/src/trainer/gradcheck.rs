//! Central finite-difference checks of the hand-written backward passes, in
//! f64 on freshly drawn parameters and inputs.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayD, ArrayViewMutD};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bce_with_logits, TrainError};
use crate::encoder::{pool, pool_backward, EmbeddingMatrix, Mode, PoolParams, Pooling};
use crate::hashing::derive_seed;
use crate::heads::{gru_forward, gru_backward, GruParams, LinearHead};
use crate::model::{HeadKind, Model, ModelDims};
use crate::ontology::Ontology;
use crate::synthetic::random_taxonomy;

/// Relative error is `|a - n| / max(|a|, |n|, FLOOR)`; the floor keeps
/// coordinates whose true gradient is zero from dividing rounding noise by
/// rounding noise.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradCheckComponent {
    PoolingCls,
    PoolingConcat,
    LinearHead,
    GruCell,
    TeacherForcedGru,
}

impl GradCheckComponent {
    pub const ALL: [GradCheckComponent; 5] = [
        GradCheckComponent::PoolingCls,
        GradCheckComponent::PoolingConcat,
        GradCheckComponent::LinearHead,
        GradCheckComponent::GruCell,
        GradCheckComponent::TeacherForcedGru,
    ];
}

impl std::fmt::Display for GradCheckComponent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GradCheckComponent::PoolingCls => "pooling-cls",
            GradCheckComponent::PoolingConcat => "pooling-concat",
            GradCheckComponent::LinearHead => "linear-head",
            GradCheckComponent::GruCell => "gru-cell",
            GradCheckComponent::TeacherForcedGru => "teacher-forced-gru",
        })
    }
}

impl std::str::FromStr for GradCheckComponent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| format!("unknown grad-check component {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub component: GradCheckComponent,
    pub trials: usize,
    pub eps: f64,
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// `tensor[flat index]` of the worst coordinate, with its trial.
    pub worst: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// A differentiable scalar function of some named tensors.
trait Probe {
    fn loss(&self) -> f64;
    fn params(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)>;
    /// Analytic gradients, in the order of [`Probe::params`].
    fn analytic(&self) -> Vec<ArrayD<f64>>;
}

fn uniform1(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-a..a))
}

fn uniform2(rng: &mut ChaCha8Rng, r: usize, c: usize, a: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-a..a))
}

fn random_embeddings(rng: &mut ChaCha8Rng, seq: usize, d: usize) -> EmbeddingMatrix {
    let n = rng.random_range(1..=seq);
    let mut rows = Array2::<f32>::zeros((seq + 1, d));
    for i in 0..=n {
        for j in 0..d {
            rows[[i, j]] = rng.random_range(-1.0f32..1.0);
        }
    }
    EmbeddingMatrix::new(rows, n).expect("finite rows")
}

fn random_pool_params(rng: &mut ChaCha8Rng, d: usize, first_k: usize) -> PoolParams<f64> {
    PoolParams {
        w: uniform2(rng, d, d, 0.5),
        b: uniform1(rng, d, 0.5),
        dropout: 0.25,
        first_k,
    }
}

/// `r . pool(e)`, with a dropout mask fixed by `mask_seed`.
struct PoolProbe {
    e: EmbeddingMatrix,
    strategy: Pooling,
    p: PoolParams<f64>,
    r: Array1<f64>,
    mask_seed: u64,
}

impl Probe for PoolProbe {
    fn loss(&self) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.mask_seed);
        let (v, _) = pool(&self.e, self.strategy, Some(&self.p), Mode::Train(&mut rng)).expect("shapes agree");
        v.values.dot(&self.r)
    }

    fn params(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        vec![
            ("pool.w", self.p.w.view_mut().into_dyn()),
            ("pool.b", self.p.b.view_mut().into_dyn()),
        ]
    }

    fn analytic(&self) -> Vec<ArrayD<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.mask_seed);
        let (_, cache) = pool(&self.e, self.strategy, Some(&self.p), Mode::Train(&mut rng)).expect("shapes agree");
        let mut g = PoolParams::zeros(self.p.d(), self.p.dropout, self.p.first_k);
        pool_backward(&cache, self.r.view(), &mut g);
        vec![g.w.into_dyn(), g.b.into_dyn()]
    }
}

/// BCE of a linear head on a free input vector.
struct LinearProbe {
    head: LinearHead<f64>,
    v: Array1<f64>,
    y: Array1<f64>,
}

impl Probe for LinearProbe {
    fn loss(&self) -> f64 {
        let s = self.head.forward(self.v.view()).expect("shapes agree");
        bce_with_logits(s.view(), self.y.view()).expect("lengths agree").0
    }

    fn params(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        vec![
            ("head.w", self.head.w.view_mut().into_dyn()),
            ("head.b", self.head.b.view_mut().into_dyn()),
            ("input.v", self.v.view_mut().into_dyn()),
        ]
    }

    fn analytic(&self) -> Vec<ArrayD<f64>> {
        let s = self.head.forward(self.v.view()).expect("shapes agree");
        let (_, ds) = bce_with_logits(s.view(), self.y.view()).expect("lengths agree");
        let mut g = LinearHead::zeros(self.head.n_out(), self.v.len());
        let dv = self.head.backward(self.v.view(), ds.view(), &mut g);
        vec![g.w.into_dyn(), g.b.into_dyn(), dv.into_dyn()]
    }
}

/// `r . gru(x, h_prev)`.
struct CellProbe {
    g: GruParams<f64>,
    x: Array1<f64>,
    h_prev: Array1<f64>,
    r: Array1<f64>,
}

fn gru_params_mut(g: &mut GruParams<f64>) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
    vec![
        ("gru.wz", g.wz.view_mut().into_dyn()),
        ("gru.wr", g.wr.view_mut().into_dyn()),
        ("gru.wh", g.wh.view_mut().into_dyn()),
        ("gru.uz", g.uz.view_mut().into_dyn()),
        ("gru.ur", g.ur.view_mut().into_dyn()),
        ("gru.uh", g.uh.view_mut().into_dyn()),
        ("gru.bz", g.bz.view_mut().into_dyn()),
        ("gru.br", g.br.view_mut().into_dyn()),
        ("gru.bh", g.bh.view_mut().into_dyn()),
    ]
}

impl Probe for CellProbe {
    fn loss(&self) -> f64 {
        let (h, _) = gru_forward(self.x.view(), self.h_prev.view(), &self.g).expect("shapes agree");
        h.dot(&self.r)
    }

    fn params(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        let mut out = gru_params_mut(&mut self.g);
        out.push(("input.x", self.x.view_mut().into_dyn()));
        out.push(("input.h_prev", self.h_prev.view_mut().into_dyn()));
        out
    }

    fn analytic(&self) -> Vec<ArrayD<f64>> {
        let (_, cache) = gru_forward(self.x.view(), self.h_prev.view(), &self.g).expect("shapes agree");
        let mut g = GruParams::zeros(self.g.hidden(), self.g.input());
        let (dx, dh) = gru_backward(&cache, self.r.view(), &self.g, &mut g);
        let mut out: Vec<ArrayD<f64>> = gru_params_mut(&mut g).into_iter().map(|(_, t)| t.to_owned()).collect();
        out.push(dx.into_dyn());
        out.push(dh.into_dyn());
        out
    }
}

/// Summed teacher-forced masked cross-entropy of a whole model (pooling
/// included) over every gold path.
struct TeacherProbe {
    model: Model<f64>,
    e: EmbeddingMatrix,
    gold: BTreeSet<usize>,
    o: Ontology,
    mask_seed: u64,
}

impl TeacherProbe {
    fn run(&self) -> (f64, Model<f64>) {
        let mut grads = self.model.zeros_like();
        let mut rng = ChaCha8Rng::seed_from_u64(self.mask_seed);
        let loss = self
            .model
            .loss_and_grad(&self.e, &self.gold, &self.o, Mode::Train(&mut rng), 1.0, &mut grads)
            .expect("valid sample");
        (loss, grads)
    }
}

impl Probe for TeacherProbe {
    fn loss(&self) -> f64 {
        self.run().0
    }

    fn params(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        self.model.tensors_mut()
    }

    fn analytic(&self) -> Vec<ArrayD<f64>> {
        let (_, g) = self.run();
        g.tensors().into_iter().map(|(_, t)| t.to_owned()).collect()
    }
}

struct Worst {
    err: f64,
    at: String,
    analytic: f64,
    numeric: f64,
}

fn check_probe(probe: &mut dyn Probe, eps: f64, trial: usize, worst: &mut Worst) -> usize {
    let analytic = probe.analytic();
    let n_tensors = probe.params().len();
    assert_eq!(analytic.len(), n_tensors);
    let mut coords = 0;
    for (ti, a) in analytic.iter().enumerate() {
        for (flat, &ga) in a.iter().enumerate() {
            let orig = {
                let mut ps = probe.params();
                let x = ps[ti].1.as_slice_mut().expect("contiguous");
                let orig = x[flat];
                x[flat] = orig + eps;
                orig
            };
            let up = probe.loss();
            probe.params()[ti].1.as_slice_mut().expect("contiguous")[flat] = orig - eps;
            let down = probe.loss();
            let mut ps = probe.params();
            let name = ps[ti].0;
            ps[ti].1.as_slice_mut().expect("contiguous")[flat] = orig;
            let gn = (up - down) / (2.0 * eps);
            let err = (ga - gn).abs() / ga.abs().max(gn.abs()).max(FLOOR);
            // NaN compares false, so test for it explicitly
            if err > worst.err || err.is_nan() {
                *worst = Worst {
                    err,
                    at: format!("{name}[{flat}] (trial {trial})"),
                    analytic: ga,
                    numeric: gn,
                };
            }
            coords += 1;
        }
    }
    coords
}

/// Runs `trials` checks of `component` at embedding width `d` and hidden
/// size `h`, each trial with new random parameters and inputs.
pub fn grad_check(
    component: GradCheckComponent,
    trials: usize,
    d: usize,
    h: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    if d == 0 || h == 0 || !(eps > 0.0) {
        return Err(TrainError::Config("grad check needs positive d, h and eps".into()));
    }
    let mut worst = Worst {
        err: 0.0,
        at: String::new(),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut coordinates = 0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[trial as u64]));
        let mask_seed = rng.random();
        let seq = 6;
        let first_k = 3;
        let mut probe: Box<dyn Probe> = match component {
            GradCheckComponent::PoolingCls | GradCheckComponent::PoolingConcat => {
                let strategy = if component == GradCheckComponent::PoolingCls {
                    Pooling::Cls
                } else {
                    Pooling::Concat
                };
                let p = random_pool_params(&mut rng, d, first_k);
                let r = uniform1(&mut rng, strategy.dim(d, first_k), 1.0);
                Box::new(PoolProbe {
                    e: random_embeddings(&mut rng, seq, d),
                    strategy,
                    p,
                    r,
                    mask_seed,
                })
            }
            GradCheckComponent::LinearHead => {
                let n_out = 5;
                let head = LinearHead {
                    w: uniform2(&mut rng, n_out, d, 1.0),
                    b: uniform1(&mut rng, n_out, 1.0),
                };
                let v = uniform1(&mut rng, d, 1.0);
                let y = Array1::from_shape_fn(n_out, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
                Box::new(LinearProbe { head, v, y })
            }
            GradCheckComponent::GruCell => {
                let input = d + h;
                let g = GruParams {
                    wz: uniform2(&mut rng, h, input, 0.5),
                    wr: uniform2(&mut rng, h, input, 0.5),
                    wh: uniform2(&mut rng, h, input, 0.5),
                    uz: uniform2(&mut rng, h, h, 0.5),
                    ur: uniform2(&mut rng, h, h, 0.5),
                    uh: uniform2(&mut rng, h, h, 0.5),
                    bz: uniform1(&mut rng, h, 0.5),
                    br: uniform1(&mut rng, h, 0.5),
                    bh: uniform1(&mut rng, h, 0.5),
                };
                Box::new(CellProbe {
                    g,
                    x: uniform1(&mut rng, input, 1.0),
                    h_prev: uniform1(&mut rng, h, 1.0),
                    r: uniform1(&mut rng, h, 1.0),
                })
            }
            GradCheckComponent::TeacherForcedGru => {
                let o = random_taxonomy(&mut rng, 4, 3);
                let dims = ModelDims {
                    d,
                    seq,
                    first_k,
                    hidden: h,
                    dropout: 0.25,
                };
                let pooling = if rng.random_bool(0.5) { Pooling::Cls } else { Pooling::Concat };
                let mut model = Model::<f64>::init(HeadKind::Gru, pooling, &dims, &o, rng.random());
                // nonzero biases and a larger initial embedding exercise every path
                for (name, mut t) in model.tensors_mut() {
                    if name.ends_with(".b") || name.starts_with("gru.b") || name == "head.cb" || name == "head.e_init" {
                        t.mapv_inplace(|_| rng.random_range(-0.5..0.5));
                    }
                }
                let n_gold = rng.random_range(1..=2.min(o.n_leaves()));
                let mut gold = BTreeSet::new();
                while gold.len() < n_gold {
                    gold.insert(*o.leaves().choose(&mut rng).expect("leaves"));
                }
                Box::new(TeacherProbe {
                    model,
                    e: random_embeddings(&mut rng, seq, d),
                    gold,
                    o,
                    mask_seed,
                })
            }
        };
        coordinates += check_probe(probe.as_mut(), eps, trial, &mut worst);
    }
    Ok(GradCheckReport {
        component,
        trials,
        eps,
        coordinates,
        max_rel_err: worst.err,
        worst: worst.at,
        worst_analytic: worst.analytic,
        worst_numeric: worst.numeric,
    })
}
