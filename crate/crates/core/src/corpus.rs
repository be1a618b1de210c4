//! Corpus ingestion, per-language train/dev splitting and the interleaved
//! slice schedule.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{derive_seed, fnv1a64};
use crate::ontology::{LabelId, Ontology, OntologyError};

/// The thirteen training languages, in schedule order.
pub const DEFAULT_LANGS: [&str; 13] = [
    "en", "de", "es", "fr", "it", "pt", "ru", "tr", "ar", "zh", "pl", "nl", "ko",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("line {line_no}: {source}")]
    Label {
        line_no: usize,
        #[source]
        source: OntologyError,
    },
    #[error("duplicate page ({lang}, {page_id})")]
    DuplicatePage { lang: String, page_id: u64 },
    #[error("language {0} has no training pages")]
    UnknownLanguage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Page {
    pub page_id: u64,
    pub lang: String,
    pub text: String,
    pub gold: BTreeSet<LabelId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PageRecord {
    page_id: u64,
    lang: String,
    text: String,
    labels: Vec<LabelId>,
}

/// Reads a JSONL corpus, validating labels against `ontology`.
pub fn parse_corpus<R: BufRead>(reader: R, ontology: &Ontology) -> Result<Vec<Page>, CorpusError> {
    let mut pages = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PageRecord = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
            line_no,
            reason: e.to_string(),
        })?;
        if rec.lang.is_empty() || !rec.lang.bytes().all(|b| b.is_ascii_lowercase()) {
            return Err(CorpusError::MalformedLine {
                line_no,
                reason: format!("language code {:?} is not lowercase ASCII", rec.lang),
            });
        }
        let gold: BTreeSet<LabelId> = rec.labels.into_iter().collect();
        ontology
            .gold_indices(&gold)
            .map_err(|source| CorpusError::Label { line_no, source })?;
        if !seen.insert((rec.lang.clone(), rec.page_id)) {
            return Err(CorpusError::DuplicatePage {
                lang: rec.lang,
                page_id: rec.page_id,
            });
        }
        pages.push(Page {
            page_id: rec.page_id,
            lang: rec.lang,
            text: rec.text,
            gold,
        });
    }
    Ok(pages)
}

/// Opens a corpus file; `.gz` files are decompressed transparently.
pub fn load_corpus(path: &Path, ontology: &Ontology) -> Result<Vec<Page>, CorpusError> {
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    parse_corpus(BufReader::new(reader), ontology)
}

pub fn write_corpus<W: Write>(mut w: W, pages: &[Page]) -> std::io::Result<()> {
    for p in pages {
        let rec = PageRecord {
            page_id: p.page_id,
            lang: p.lang.clone(),
            text: p.text.clone(),
            labels: p.gold.iter().cloned().collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SplitCorpus {
    pub train: Vec<Page>,
    pub dev: Vec<Page>,
    pub seed: u64,
    pub ratio: f64,
}

/// Stratified per-language random split. Input order does not matter: pages
/// are first sorted by `(lang, page_id)`.
pub fn split(pages: &[Page], seed: u64, ratio: f64) -> SplitCorpus {
    assert!(ratio > 0.0 && ratio < 1.0, "split ratio must lie in (0, 1)");
    let mut by_lang: BTreeMap<&str, Vec<&Page>> = BTreeMap::new();
    for p in pages {
        by_lang.entry(p.lang.as_str()).or_default().push(p);
    }
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (lang, mut group) in by_lang {
        group.sort_by_key(|p| p.page_id);
        let n = group.len();
        let n_train = ((ratio * n as f64).round() as usize).clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[fnv1a64(lang.as_bytes())]));
        order.shuffle(&mut rng);
        let mut in_train = vec![false; n];
        for &i in &order[..n_train] {
            in_train[i] = true;
        }
        for (p, t) in group.into_iter().zip(in_train) {
            if t {
                train.push(p.clone());
            } else {
                dev.push(p.clone());
            }
        }
    }
    SplitCorpus {
        train,
        dev,
        seed,
        ratio,
    }
}

/// One (language, slice) block of the schedule. `pages` index into
/// `SplitCorpus::train`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleBlock {
    pub lang: String,
    /// 1-based slice number.
    pub slice: usize,
    pub pages: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceSchedule {
    pub order: Vec<ScheduleBlock>,
    pub n_slices: usize,
}

/// Splits each language's training pages into `n_slices` contiguous slices
/// (sizes differ by at most one) and interleaves them: slice 1 of every
/// language, then slice 2 of every language, and so on.
pub fn slice_schedule(
    split: &SplitCorpus,
    n_slices: usize,
    langs: &[String],
) -> Result<SliceSchedule, CorpusError> {
    assert!(n_slices >= 1, "at least one slice");
    let mut per_lang: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in split.train.iter().enumerate() {
        per_lang.entry(p.lang.as_str()).or_default().push(i);
    }
    for l in langs {
        if !per_lang.contains_key(l.as_str()) {
            return Err(CorpusError::UnknownLanguage(l.clone()));
        }
    }
    let mut order = Vec::with_capacity(n_slices * langs.len());
    for s in 0..n_slices {
        for l in langs {
            let idx = &per_lang[l.as_str()];
            let n = idx.len();
            let (lo, hi) = (s * n / n_slices, (s + 1) * n / n_slices);
            order.push(ScheduleBlock {
                lang: l.clone(),
                slice: s + 1,
                pages: idx[lo..hi].to_vec(),
            });
        }
    }
    Ok(SliceSchedule { order, n_slices })
}

impl ScheduleBlock {
    /// Shuffles the block with a seed derived from `(seed, epoch, lang,
    /// slice)` and cuts it into batches of `batch_size`; only the last batch
    /// may be short.
    pub fn batches(&self, batch_size: usize, epoch: usize, seed: u64) -> Vec<Vec<usize>> {
        assert!(batch_size >= 1);
        let mut pages = self.pages.clone();
        let s = derive_seed(
            seed,
            &[epoch as u64, fnv1a64(self.lang.as_bytes()), self.slice as u64],
        );
        pages.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        pages.chunks(batch_size).map(<[usize]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page(lang: &str, id: u64) -> Page {
        Page {
            page_id: id,
            lang: lang.into(),
            text: String::new(),
            gold: BTreeSet::new(),
        }
    }

    fn toy_ontology() -> Ontology {
        Ontology::parse("1\tName\n1.5\tLocation\n1.5.1\tGPE\n1.5.1.1\tCity\n").unwrap()
    }

    #[test]
    fn parses_example_line() {
        let o = toy_ontology();
        let src = r#"{"page_id":1,"lang":"en","text":"New York ...","labels":["1.5.1.1"]}"#;
        let pages = parse_corpus(src.as_bytes(), &o).unwrap();
        assert_eq!(pages.len(), 1);
        assert_eq!(pages[0].gold, ["1.5.1.1".parse().unwrap()].into());
        assert!(parse_corpus("".as_bytes(), &o).unwrap().is_empty());
    }

    #[test]
    fn parse_errors() {
        let o = toy_ontology();
        let unknown = r#"{"page_id":1,"lang":"en","text":"x","labels":["9.9.9.9"]}"#;
        assert!(matches!(
            parse_corpus(unknown.as_bytes(), &o),
            Err(CorpusError::Label {
                source: OntologyError::UnknownLabel(_),
                ..
            })
        ));
        let bad = "{\"page_id\":1}\n";
        assert!(matches!(
            parse_corpus(bad.as_bytes(), &o),
            Err(CorpusError::MalformedLine { line_no: 1, .. })
        ));
        let dup = format!(
            "{0}\n{0}\n",
            r#"{"page_id":1,"lang":"en","text":"x","labels":["1.5.1.1"]}"#
        );
        assert!(matches!(
            parse_corpus(dup.as_bytes(), &o),
            Err(CorpusError::DuplicatePage { .. })
        ));
    }

    #[test]
    fn split_sizes() {
        let pages: Vec<Page> = (0..100).map(|i| page("en", i)).collect();
        let s = split(&pages, 7, 0.95);
        assert_eq!((s.train.len(), s.dev.len()), (95, 5));
        let one = split(&[page("en", 3)], 7, 0.95);
        assert_eq!((one.train.len(), one.dev.len()), (1, 0));
    }

    #[test]
    fn split_is_deterministic_and_order_free() {
        let pages: Vec<Page> = (0..60).map(|i| page(if i % 3 == 0 { "de" } else { "en" }, i)).collect();
        let a = split(&pages, 11, 0.8);
        let mut rev = pages.clone();
        rev.reverse();
        let b = split(&rev, 11, 0.8);
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        let c = split(&pages, 12, 0.8);
        assert_ne!(a.dev, c.dev);
    }

    #[test]
    fn schedule_interleaves() {
        let pages: Vec<Page> = (0..20)
            .map(|i| page("en", i))
            .chain((0..20).map(|i| page("de", i)))
            .collect();
        let s = SplitCorpus {
            train: pages,
            dev: vec![],
            seed: 0,
            ratio: 0.95,
        };
        let langs = vec!["en".to_string(), "de".to_string()];
        let sched = slice_schedule(&s, 10, &langs).unwrap();
        assert_eq!(sched.order.len(), 20);
        let heads: Vec<(String, usize)> =
            sched.order.iter().take(4).map(|b| (b.lang.clone(), b.slice)).collect();
        assert_eq!(
            heads,
            [("en".into(), 1), ("de".into(), 1), ("en".into(), 2), ("de".into(), 2)]
        );
        assert!(sched.order.iter().all(|b| b.pages.len() == 2));

        let single = slice_schedule(&s, 1, &langs).unwrap();
        assert_eq!(single.order.len(), 2);
        assert_eq!(single.order[0].pages.len(), 20);

        assert!(matches!(
            slice_schedule(&s, 10, &["fr".to_string()]),
            Err(CorpusError::UnknownLanguage(_))
        ));
    }

    #[test]
    fn batches_cover_block() {
        let block = ScheduleBlock {
            lang: "en".into(),
            slice: 1,
            pages: (0..70).collect(),
        };
        let b = block.batches(32, 0, 5);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [32, 32, 6]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, block.pages);
        assert_eq!(b, block.batches(32, 0, 5));
        assert_ne!(b, block.batches(32, 1, 5));
    }
}
