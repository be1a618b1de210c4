//! Micro/macro precision, recall and F1 over label sets, per-label tables
//! and the error taxonomy.
//!
//! Every function takes `(predicted, gold)` pairs.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("empty input: no samples to evaluate")]
    EmptyInput,
}

pub type Pair<L> = (BTreeSet<L>, BTreeSet<L>);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.tp, self.fp, self.fn_)
    }

    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Prf {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

/// Per-label confusion counts. Merging is associative, so shards can be
/// counted independently.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelConfusion<L: Ord> {
    pub counts: BTreeMap<L, Counts>,
}

impl<L: Ord> Default for LabelConfusion<L> {
    fn default() -> Self {
        Self {
            counts: BTreeMap::new(),
        }
    }
}

impl<L: Ord + Clone> LabelConfusion<L> {
    pub fn from_pairs(pairs: &[Pair<L>]) -> Self {
        let mut c = Self::default();
        for (pred, gold) in pairs {
            c.add(pred, gold);
        }
        c
    }

    pub fn add(&mut self, pred: &BTreeSet<L>, gold: &BTreeSet<L>) {
        for l in pred {
            let e = self.counts.entry(l.clone()).or_default();
            if gold.contains(l) {
                e.tp += 1;
            } else {
                e.fp += 1;
            }
        }
        for l in gold.difference(pred) {
            self.counts.entry(l.clone()).or_default().fn_ += 1;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for (l, c) in &other.counts {
            let e = self.counts.entry(l.clone()).or_default();
            e.tp += c.tp;
            e.fp += c.fp;
            e.fn_ += c.fn_;
        }
    }

    pub fn total(&self) -> Counts {
        self.counts.values().fold(Counts::default(), |acc, c| Counts {
            tp: acc.tp + c.tp,
            fp: acc.fp + c.fp,
            fn_: acc.fn_ + c.fn_,
        })
    }
}

/// Globally pooled counts.
pub fn micro_prf<L: Ord + Clone>(pairs: &[Pair<L>]) -> Result<Prf, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(LabelConfusion::from_pairs(pairs).total().prf())
}

/// Which labels enter the macro average.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Universe<L> {
    /// Labels that occur in gold or in predictions of the evaluated set.
    Observed,
    /// Exactly these labels; absent ones score 0.
    Fixed(BTreeSet<L>),
}

impl<L> Universe<L> {
    pub fn describe(&self) -> &'static str {
        match self {
            Universe::Observed => "labels present in gold or predictions",
            Universe::Fixed(_) => "fixed label list",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelRow<L> {
    pub label: L,
    #[serde(flatten)]
    pub counts: Counts,
    #[serde(flatten)]
    pub prf: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroReport<L> {
    #[serde(flatten)]
    pub mean: Prf,
    pub rows: Vec<LabelRow<L>>,
}

/// Unweighted mean of per-label precision, recall and F1.
pub fn macro_prf<L: Ord + Clone>(pairs: &[Pair<L>], universe: &Universe<L>) -> Result<MacroReport<L>, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let conf = LabelConfusion::from_pairs(pairs);
    Ok(macro_from_confusion(&conf, universe))
}

pub fn macro_from_confusion<L: Ord + Clone>(conf: &LabelConfusion<L>, universe: &Universe<L>) -> MacroReport<L> {
    let rows: Vec<LabelRow<L>> = match universe {
        Universe::Observed => conf
            .counts
            .iter()
            .filter(|(_, c)| c.tp + c.fp + c.fn_ > 0)
            .map(|(l, c)| LabelRow {
                label: l.clone(),
                counts: *c,
                prf: c.prf(),
            })
            .collect(),
        Universe::Fixed(labels) => labels
            .iter()
            .map(|l| {
                let c = conf.counts.get(l).copied().unwrap_or_default();
                LabelRow {
                    label: l.clone(),
                    counts: c,
                    prf: c.prf(),
                }
            })
            .collect(),
    };
    let n = rows.len() as f64;
    let mean = if rows.is_empty() {
        Prf::default()
    } else {
        Prf {
            precision: rows.iter().map(|r| r.prf.precision).sum::<f64>() / n,
            recall: rows.iter().map(|r| r.prf.recall).sum::<f64>() / n,
            f1: rows.iter().map(|r| r.prf.f1).sum::<f64>() / n,
        }
    };
    MacroReport { mean, rows }
}

/// The `k` lowest-F1 rows, ascending; ties keep label order.
pub fn worst_labels<L: Ord + Clone>(rows: &[LabelRow<L>], k: usize) -> Vec<LabelRow<L>> {
    let mut sorted: Vec<&LabelRow<L>> = rows.iter().collect();
    sorted.sort_by(|a, b| a.prf.f1.total_cmp(&b.prf.f1).then_with(|| a.label.cmp(&b.label)));
    sorted.into_iter().take(k).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ErrorKind {
    Correct,
    CompletelyIncorrect,
    OverPredicted,
    UnderPredicted,
    OverAndUnder,
}

/// Classifies one prediction against its gold set.
pub fn classify_error<L: Ord>(pred: &BTreeSet<L>, gold: &BTreeSet<L>) -> ErrorKind {
    if pred == gold {
        return ErrorKind::Correct;
    }
    if pred.intersection(gold).next().is_none() {
        return ErrorKind::CompletelyIncorrect;
    }
    let extra = pred.difference(gold).next().is_some();
    let missing = gold.difference(pred).next().is_some();
    match (extra, missing) {
        (true, true) => ErrorKind::OverAndUnder,
        (true, false) => ErrorKind::OverPredicted,
        (false, true) => ErrorKind::UnderPredicted,
        (false, false) => unreachable!("unequal sets differ somewhere"),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ErrorBreakdown {
    pub samples: u64,
    pub correct: u64,
    pub incorrect: u64,
    pub completely_incorrect: u64,
    pub over_predicted: u64,
    pub under_predicted: u64,
    pub over_and_under: u64,
}

impl ErrorBreakdown {
    pub fn record(&mut self, kind: ErrorKind) {
        self.samples += 1;
        match kind {
            ErrorKind::Correct => self.correct += 1,
            other => {
                self.incorrect += 1;
                match other {
                    ErrorKind::CompletelyIncorrect => self.completely_incorrect += 1,
                    ErrorKind::OverPredicted => self.over_predicted += 1,
                    ErrorKind::UnderPredicted => self.under_predicted += 1,
                    ErrorKind::OverAndUnder => self.over_and_under += 1,
                    ErrorKind::Correct => unreachable!(),
                }
            }
        }
    }
}

pub fn error_taxonomy<L: Ord>(pairs: &[Pair<L>]) -> Result<ErrorBreakdown, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut b = ErrorBreakdown::default();
    for (pred, gold) in pairs {
        b.record(classify_error(pred, gold));
    }
    Ok(b)
}
