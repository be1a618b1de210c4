//! Turning score vectors into leaf label sets, and tuning the global
//! threshold on a development set.

use std::collections::{BTreeSet, HashMap};

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::best_leaf_descendant;
use crate::metrics::harmonic;
use crate::numeric::{argmax, Real};
use crate::ontology::Ontology;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecisionError {
    #[error("score vector has {got} entries, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("threshold strategy needs a finite theta")]
    MissingTheta,
    #[error("development set is empty")]
    EmptyDevSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Threshold,
    MaxScore,
    ThresholdWithMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionStrategy {
    pub kind: StrategyKind,
    #[serde(default)]
    pub theta: Option<f64>,
}

impl DecisionStrategy {
    pub fn threshold(theta: f64) -> Self {
        Self {
            kind: StrategyKind::Threshold,
            theta: Some(theta),
        }
    }

    pub fn max_score() -> Self {
        Self {
            kind: StrategyKind::MaxScore,
            theta: None,
        }
    }

    pub fn threshold_with_max(theta: f64) -> Self {
        Self {
            kind: StrategyKind::ThresholdWithMax,
            theta: Some(theta),
        }
    }
}

/// What a score vector is indexed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSpace {
    /// One score per leaf, in leaf-index order.
    Leaves,
    /// One score per label, in full-index order; internal predictions are
    /// resolved to leaves.
    AllLabels,
}

impl ScoreSpace {
    pub fn len(self, o: &Ontology) -> usize {
        match self {
            ScoreSpace::Leaves => o.n_leaves(),
            ScoreSpace::AllLabels => o.len(),
        }
    }

    /// Leaf (full index) that selecting position `j` ultimately yields.
    fn leaf_for<F: Real>(self, scores: ArrayView1<'_, F>, j: usize, o: &Ontology) -> usize {
        match self {
            ScoreSpace::Leaves => o.leaf_to_full(j),
            ScoreSpace::AllLabels => best_leaf_descendant(scores, j, o),
        }
    }
}

/// Final leaf set (full indices) for one score vector.
pub fn select<F: Real>(
    scores: ArrayView1<'_, F>,
    strategy: &DecisionStrategy,
    o: &Ontology,
    space: ScoreSpace,
) -> Result<BTreeSet<usize>, DecisionError> {
    let expected = space.len(o);
    if scores.len() != expected {
        return Err(DecisionError::LengthMismatch {
            got: scores.len(),
            expected,
        });
    }
    let thresholded = |theta: Option<f64>| -> Result<BTreeSet<usize>, DecisionError> {
        let theta = theta.filter(|t| t.is_finite()).ok_or(DecisionError::MissingTheta)?;
        Ok(scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s.to_f64_lossy() > theta)
            .map(|(j, _)| space.leaf_for(scores, j, o))
            .collect())
    };
    let best = || -> BTreeSet<usize> {
        argmax(scores)
            .map(|j| space.leaf_for(scores, j, o))
            .into_iter()
            .collect()
    };
    match strategy.kind {
        StrategyKind::Threshold => thresholded(strategy.theta),
        StrategyKind::MaxScore => Ok(best()),
        StrategyKind::ThresholdWithMax => {
            let set = thresholded(strategy.theta)?;
            Ok(if set.is_empty() { best() } else { set })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuneMetric {
    MacroF1,
    MicroF1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TunedThreshold {
    pub theta: f64,
    /// Metric value reached on the development set at `theta`.
    pub value: f64,
}

/// Incremental confusion state for the sweep. The macro average runs over
/// labels with any tp, fp or fn so far.
struct SweepState {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    f1: Vec<f64>,
    f1_sum: f64,
    observed: usize,
    totals: (u64, u64, u64),
}

impl SweepState {
    fn new(n_labels: usize, golds: &[BTreeSet<usize>]) -> Self {
        let mut s = Self {
            tp: vec![0; n_labels],
            fp: vec![0; n_labels],
            fn_: vec![0; n_labels],
            f1: vec![0.0; n_labels],
            f1_sum: 0.0,
            observed: 0,
            totals: (0, 0, 0),
        };
        for g in golds {
            for &l in g {
                if s.fn_[l] == 0 {
                    s.observed += 1;
                }
                s.fn_[l] += 1;
                s.totals.2 += 1;
            }
        }
        s
    }

    fn refresh(&mut self, l: usize, was_observed: bool) {
        let p = ratio(self.tp[l], self.tp[l] + self.fp[l]);
        let r = ratio(self.tp[l], self.tp[l] + self.fn_[l]);
        let f = harmonic(p, r);
        self.f1_sum += f - self.f1[l];
        self.f1[l] = f;
        if !was_observed {
            self.observed += 1;
        }
    }

    /// Leaf `l` enters the predicted set of a sample whose gold set is `gold`.
    fn predict(&mut self, l: usize, gold: &BTreeSet<usize>) {
        let was = self.tp[l] + self.fp[l] + self.fn_[l] > 0;
        if gold.contains(&l) {
            self.fn_[l] -= 1;
            self.tp[l] += 1;
            self.totals.2 -= 1;
            self.totals.0 += 1;
        } else {
            self.fp[l] += 1;
            self.totals.1 += 1;
        }
        self.refresh(l, was);
    }

    fn value(&self, metric: TuneMetric) -> f64 {
        match metric {
            TuneMetric::MacroF1 => {
                if self.observed == 0 {
                    0.0
                } else {
                    self.f1_sum / self.observed as f64
                }
            }
            TuneMetric::MicroF1 => {
                let (tp, fp, fn_) = self.totals;
                harmonic(ratio(tp, tp + fp), ratio(tp, tp + fn_))
            }
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Exact sweep of the Threshold strategy over every distinct score gap.
///
/// `dev` pairs score vectors with gold leaf sets (full indices). Candidates
/// are the midpoints between consecutive distinct scores plus one sentinel
/// above the maximum and one below the minimum. Ties in the metric go to
/// the larger theta.
pub fn tune_threshold<F: Real>(
    dev: &[(ArrayView1<'_, F>, &BTreeSet<usize>)],
    o: &Ontology,
    space: ScoreSpace,
    metric: TuneMetric,
) -> Result<TunedThreshold, DecisionError> {
    if dev.is_empty() {
        return Err(DecisionError::EmptyDevSet);
    }
    let expected = space.len(o);
    let mut events: Vec<(f64, usize, usize)> = Vec::new();
    for (s, (scores, _)) in dev.iter().enumerate() {
        if scores.len() != expected {
            return Err(DecisionError::LengthMismatch {
                got: scores.len(),
                expected,
            });
        }
        for j in 0..scores.len() {
            events.push((scores[j].to_f64_lossy(), s, space.leaf_for(*scores, j, o)));
        }
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    let golds: Vec<BTreeSet<usize>> = dev.iter().map(|(_, g)| (*g).clone()).collect();
    let mut state = SweepState::new(o.len(), &golds);
    // per-sample multiplicity of each predicted leaf
    let mut held: Vec<HashMap<usize, u32>> = vec![HashMap::new(); dev.len()];

    let (hi, lo) = match (events.first(), events.last()) {
        (Some(h), Some(l)) => (h.0, l.0),
        _ => (0.0, 0.0),
    };
    let mut best = TunedThreshold {
        theta: hi + 1.0,
        value: state.value(metric),
    };
    let mut i = 0;
    while i < events.len() {
        let score = events[i].0;
        while i < events.len() && events[i].0 == score {
            let (_, s, leaf) = events[i];
            let count = held[s].entry(leaf).or_insert(0);
            *count += 1;
            if *count == 1 {
                state.predict(leaf, &golds[s]);
            }
            i += 1;
        }
        let theta = match events.get(i) {
            Some(next) => next.0 + (score - next.0) / 2.0,
            None => lo - 1.0,
        };
        let value = state.value(metric);
        if value > best.value + 1e-12 {
            best = TunedThreshold { theta, value };
        }
    }
    Ok(best)
}
