//! Scoring pages with a model, applying decision strategies per language,
//! and the JSONL record formats for predictions and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Page;
use crate::decision::{select, tune_threshold, DecisionStrategy, StrategyKind, TuneMetric, TunedThreshold};
use crate::encoder::EmbeddingProvider;
use crate::metrics::{macro_prf, micro_prf, Pair, Universe};
use crate::model::{Model, Output};
use crate::numeric::Real;
use crate::ontology::{LabelId, Ontology};
use crate::trainer::TrainError;

/// Runs the model over `pages`. With `threads > 1` pages are scored in
/// parallel; output order always follows `pages`.
pub fn score_pages<F: Real, P: EmbeddingProvider + ?Sized>(
    model: &Model<F>,
    pages: &[Page],
    provider: &P,
    o: &Ontology,
    threads: usize,
) -> Result<Vec<Output<F>>, TrainError> {
    let one = |p: &Page| -> Result<Output<F>, TrainError> {
        let e = provider.embed(p)?;
        model.forward(&e, o)
    };
    if threads <= 1 {
        pages.iter().map(one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| TrainError::Runtime(e.to_string()))?;
        pool.install(|| pages.par_iter().map(one).collect())
    }
}

/// Per-language decision thresholds; `default` covers unlisted languages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub metric: TuneMetric,
    pub default: f64,
    pub rows: Vec<ThresholdRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub lang: String,
    pub steps: u64,
    pub theta: f64,
    pub dev_value: f64,
}

impl ThresholdTable {
    pub fn uniform(theta: f64) -> Self {
        Self {
            metric: TuneMetric::MacroF1,
            default: theta,
            rows: Vec::new(),
        }
    }

    pub fn theta_for(&self, lang: &str) -> f64 {
        self.rows
            .iter()
            .find(|r| r.lang == lang)
            .map_or(self.default, |r| r.theta)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("lang\tsteps\ttheta\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{:.4}\n", r.lang, r.steps, r.theta));
        }
        s
    }
}

/// Applies `kind` (with the language's theta) to every output. GRU paths
/// map to their terminal leaf.
pub fn decide<F: Real>(
    outputs: &[Output<F>],
    pages: &[Page],
    model: &Model<F>,
    o: &Ontology,
    kind: StrategyKind,
    thresholds: &ThresholdTable,
) -> Result<Vec<BTreeSet<usize>>, TrainError> {
    outputs
        .iter()
        .zip(pages)
        .map(|(out, page)| match out {
            Output::Path(p) => Ok([p.leaf()].into()),
            Output::Scores(s) => {
                let space = model.kind.score_space().expect("linear heads have a score space");
                let strategy = DecisionStrategy {
                    kind,
                    theta: Some(thresholds.theta_for(&page.lang)),
                };
                Ok(select(s.view(), &strategy, o, space)?)
            }
        })
        .collect()
}

/// Tunes one threshold per language (plus a pooled default) on dev outputs.
pub fn tune_per_language<F: Real>(
    outputs: &[Output<F>],
    pages: &[Page],
    model: &Model<F>,
    o: &Ontology,
    metric: TuneMetric,
    steps: u64,
) -> Result<ThresholdTable, TrainError> {
    let space = model
        .kind
        .score_space()
        .ok_or_else(|| TrainError::Runtime("the gru head emits a single path; there is no threshold to tune".into()))?;
    let golds: Vec<BTreeSet<usize>> = pages
        .iter()
        .map(|p| o.gold_indices(&p.gold))
        .collect::<Result<_, _>>()?;
    let scores: Vec<&Array1<F>> = outputs
        .iter()
        .map(|out| match out {
            Output::Scores(s) => s,
            Output::Path(_) => unreachable!("linear heads produce scores"),
        })
        .collect();
    let mut by_lang: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in pages.iter().enumerate() {
        by_lang.entry(p.lang.as_str()).or_default().push(i);
    }
    let tune = |idx: &[usize]| -> Result<TunedThreshold, TrainError> {
        let dev: Vec<_> = idx.iter().map(|&i| (scores[i].view(), &golds[i])).collect();
        Ok(tune_threshold(&dev, o, space, metric)?)
    };
    let all: Vec<usize> = (0..pages.len()).collect();
    let default = tune(&all)?.theta;
    let mut rows = Vec::new();
    for (lang, idx) in by_lang {
        let t = tune(&idx)?;
        rows.push(ThresholdRow {
            lang: lang.to_string(),
            steps,
            theta: t.theta,
            dev_value: t.value,
        });
    }
    Ok(ThresholdTable { metric, default, rows })
}

/// One evaluation point of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lang: String,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub macro_p: f64,
    pub macro_r: f64,
    pub micro_p: f64,
    pub micro_r: f64,
}

/// Metrics per language plus a pooled `"all"` row.
pub fn metrics_by_lang(
    step: u64,
    langs: &[&str],
    pairs: &[Pair<usize>],
) -> Result<Vec<MetricsRecord>, TrainError> {
    let mut groups: BTreeMap<&str, Vec<Pair<usize>>> = BTreeMap::new();
    for (l, p) in langs.iter().zip(pairs) {
        groups.entry(l).or_default().push(p.clone());
    }
    let record = |lang: &str, pairs: &[Pair<usize>]| -> Result<MetricsRecord, TrainError> {
        let micro = micro_prf(pairs)?;
        let mac = macro_prf(pairs, &Universe::Observed)?.mean;
        Ok(MetricsRecord {
            step,
            lang: lang.to_string(),
            macro_f1: mac.f1,
            micro_f1: micro.f1,
            macro_p: mac.precision,
            macro_r: mac.recall,
            micro_p: micro.precision,
            micro_r: micro.recall,
        })
    };
    let mut out = Vec::new();
    for (lang, ps) in &groups {
        out.push(record(lang, ps)?);
    }
    out.push(record("all", pairs)?);
    Ok(out)
}

/// A line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub page_id: u64,
    pub lang: String,
    pub labels: Vec<LabelId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<LabelId, f64>>,
}

impl PredictionRecord {
    pub fn new<F: Real>(page: &Page, labels: &BTreeSet<usize>, output: Option<&Output<F>>, model: &Model<F>, o: &Ontology) -> Self {
        let scores = output.map(|out| match out {
            Output::Scores(s) => s
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    let full = match model.kind {
                        crate::model::HeadKind::LinearLeaf => o.leaf_to_full(j),
                        _ => j,
                    };
                    (o.label(full).clone(), v.to_f64_lossy())
                })
                .collect(),
            Output::Path(p) => p
                .labels
                .iter()
                .zip(&p.scores)
                .map(|(&l, &s)| (o.label(l).clone(), s))
                .collect(),
        });
        Self {
            page_id: page.page_id,
            lang: page.lang.clone(),
            labels: labels.iter().map(|&l| o.label(l).clone()).collect(),
            scores,
        }
    }
}

pub fn write_predictions<W: Write>(mut w: W, records: &[PredictionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<PredictionRecord>, TrainError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| TrainError::Runtime(format!("predictions line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_lookup_falls_back() {
        let mut t = ThresholdTable::uniform(0.25);
        t.rows.push(ThresholdRow {
            lang: "en".into(),
            steps: 10,
            theta: -1.5,
            dev_value: 0.5,
        });
        assert_eq!(t.theta_for("en"), -1.5);
        assert_eq!(t.theta_for("ko"), 0.25);
        assert_eq!(t.to_tsv(), "lang\tsteps\ttheta\nen\t10\t-1.5000\n");
    }

    #[test]
    fn prediction_record_round_trip() {
        let rec = PredictionRecord {
            page_id: 7,
            lang: "en".into(),
            labels: vec!["1.5.1.1".parse().unwrap()],
            scores: None,
        };
        let mut buf = Vec::new();
        write_predictions(&mut buf, &[rec.clone()]).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"page_id\":7,\"lang\":\"en\",\"labels\":[\"1.5.1.1\"]}\n"
        );
        assert_eq!(read_predictions(&buf[..]).unwrap(), vec![rec]);
    }

    #[test]
    fn metrics_rows_per_language() {
        let pairs: Vec<Pair<usize>> = vec![
            ([1].into(), [1].into()),
            ([2].into(), [3].into()),
        ];
        let rows = metrics_by_lang(5, &["en", "de"], &pairs).unwrap();
        let langs: Vec<_> = rows.iter().map(|r| r.lang.as_str()).collect();
        assert_eq!(langs, ["de", "en", "all"]);
        assert_eq!(rows[1].micro_f1, 1.0);
        assert_eq!(rows[0].micro_f1, 0.0);
        assert_eq!(rows[2].micro_f1, 0.5);
    }
}
