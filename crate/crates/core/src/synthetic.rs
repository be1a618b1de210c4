//! Synthetic taxonomies and corpora with planted, learnable labels.
//!
//! Each label gets a signature token. A page carries the signature of every
//! ancestor of its gold leaves plus language-specific noise words, so the
//! hash encoder sees a separable task.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Page;
use crate::hashing::{derive_seed, fnv1a64};
use crate::ontology::{LabelId, Ontology};

/// Complete tree with `branching[l]` children per node at level `l`.
/// Segments are numbered from 1.
pub fn branching_taxonomy(branching: &[usize]) -> Ontology {
    assert!(!branching.is_empty() && branching.iter().all(|&b| b > 0), "branching factors must be positive");
    let mut tsv = String::new();
    let mut level: Vec<Vec<u32>> = vec![Vec::new()];
    for &b in branching {
        let mut next = Vec::new();
        for prefix in &level {
            for c in 1..=b as u32 {
                let mut id = prefix.clone();
                id.push(c);
                next.push(id);
            }
        }
        level = next;
        for id in &level {
            push_label(&mut tsv, id);
        }
    }
    Ontology::parse_with_depth(&tsv, branching.len()).expect("generated taxonomy is well formed")
}

/// Random tree of depth at most `max_depth` with 1..=`max_branch` roots and
/// 0..=`max_branch` children per internal candidate (so leaf depths vary).
pub fn random_taxonomy<R: Rng>(rng: &mut R, max_depth: usize, max_branch: usize) -> Ontology {
    assert!(max_depth >= 1 && (1..10).contains(&max_branch));
    let mut tsv = String::new();
    let mut frontier: Vec<Vec<u32>> = Vec::new();
    let n_roots = rng.random_range(1..=max_branch);
    for c in 0..n_roots {
        // segment values are sparse on purpose, including 0
        frontier.push(vec![c as u32 * 2]);
    }
    while let Some(id) = frontier.pop() {
        push_label(&mut tsv, &id);
        if id.len() == max_depth {
            continue;
        }
        let n = rng.random_range(0..=max_branch);
        for c in 0..n {
            let mut child = id.clone();
            child.push(c as u32 + rng.random_range(0..2) * 10);
            if !frontier.contains(&child) {
                frontier.push(child);
            }
        }
    }
    Ontology::parse_with_depth(&tsv, max_depth).expect("generated taxonomy is well formed")
}

fn push_label(tsv: &mut String, id: &[u32]) {
    let s: Vec<String> = id.iter().map(u32::to_string).collect();
    tsv.push_str(&format!("{}\tnode_{}\n", s.join("."), s.join("_")));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub branching: Vec<usize>,
    pub langs: Vec<String>,
    pub pages_per_lang: usize,
    /// Fraction of pages that get a second gold leaf.
    pub multi_label_rate: f64,
    /// Noise words per signature token.
    pub noise_rate: f64,
    /// Size of each language's noise vocabulary.
    pub noise_vocab: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            branching: vec![3, 3, 3, 2],
            langs: vec!["xa".into(), "xb".into(), "xc".into()],
            pages_per_lang: 2000,
            multi_label_rate: 0.025,
            noise_rate: 0.25,
            noise_vocab: 500,
            seed: 0,
        }
    }
}

/// What the generator planted, for inspection and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SyntheticConfig,
    pub n_labels: usize,
    pub n_leaves: usize,
    pub n_pages: usize,
    pub n_multi_label: usize,
    /// Signature token of every label.
    pub signatures: BTreeMap<LabelId, String>,
    /// Gold leaves of every page, keyed by `lang/page_id`.
    pub planted: BTreeMap<String, Vec<LabelId>>,
}

pub struct SyntheticCorpus {
    pub ontology: Ontology,
    pub pages: Vec<Page>,
    pub manifest: Manifest,
}

/// Signature token of a label: language-independent and derived from the ID.
pub fn signature(id: &LabelId) -> String {
    format!("sig{:08x}", fnv1a64(id.to_string().as_bytes()) as u32)
}

fn noise_word(lang: &str, k: usize) -> String {
    format!("{lang}{k}")
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticCorpus {
    assert!((0.0..=1.0).contains(&cfg.multi_label_rate), "multi_label_rate must lie in [0, 1]");
    assert!(cfg.noise_rate >= 0.0 && cfg.noise_vocab > 0);
    let o = branching_taxonomy(&cfg.branching);
    let leaves = o.leaves().to_vec();
    let signatures: BTreeMap<LabelId, String> = o.labels().iter().map(|l| (l.clone(), signature(l))).collect();

    let mut pages = Vec::new();
    let mut planted = BTreeMap::new();
    let mut n_multi = 0;
    for (li, lang) in cfg.langs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[li as u64, fnv1a64(lang.as_bytes())]));
        // an exact count of multi-label pages, at random positions
        let n_two = (cfg.multi_label_rate * cfg.pages_per_lang as f64).round() as usize;
        let mut two = vec![false; cfg.pages_per_lang];
        two[..n_two.min(cfg.pages_per_lang)].fill(true);
        two.shuffle(&mut rng);
        for (i, &is_two) in two.iter().enumerate() {
            let first = *leaves.choose(&mut rng).expect("taxonomy has leaves");
            let mut gold = BTreeSet::from([first]);
            if is_two && leaves.len() > 1 {
                while gold.len() < 2 {
                    gold.insert(*leaves.choose(&mut rng).expect("non-empty"));
                }
                n_multi += 1;
            }
            let mut tokens: Vec<String> = o
                .expand_indices(&gold)
                .into_iter()
                .map(|l| signatures[o.label(l)].clone())
                .collect();
            let n_noise = (tokens.len() as f64 * cfg.noise_rate).round() as usize;
            for _ in 0..n_noise {
                tokens.push(noise_word(lang, rng.random_range(0..cfg.noise_vocab)));
            }
            tokens.shuffle(&mut rng);
            let page_id = i as u64 + 1;
            let gold_ids: BTreeSet<LabelId> = gold.iter().map(|&g| o.label(g).clone()).collect();
            planted.insert(format!("{lang}/{page_id}"), gold_ids.iter().cloned().collect());
            pages.push(Page {
                page_id,
                lang: lang.clone(),
                text: tokens.join(" "),
                gold: gold_ids,
            });
        }
    }
    let manifest = Manifest {
        config: cfg.clone(),
        n_labels: o.len(),
        n_leaves: o.n_leaves(),
        n_pages: pages.len(),
        n_multi_label: n_multi,
        signatures,
        planted,
    };
    SyntheticCorpus {
        ontology: o,
        pages,
        manifest,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branching_node_count() {
        let o = branching_taxonomy(&[3, 3, 3, 2]);
        assert_eq!(o.len(), 3 + 9 + 27 + 54);
        assert_eq!(o.n_leaves(), 54);
        assert_eq!(o.max_depth(), 4);
        assert_eq!(o.roots().len(), 3);
    }

    #[test]
    fn random_taxonomies_parse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let o = random_taxonomy(&mut rng, 4, 3);
            assert!(o.n_leaves() >= 1 && o.max_depth() <= 4);
        }
    }

    #[test]
    fn corpus_is_deterministic_and_planted() {
        let cfg = SyntheticConfig {
            pages_per_lang: 200,
            ..SyntheticConfig::default()
        };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.pages, b.pages);
        assert_eq!(a.pages.len(), 600);
        assert_eq!(a.manifest.n_multi_label, 15);
        let p = &a.pages[0];
        for id in a.ontology.expand_gold(&p.gold).unwrap() {
            assert!(p.text.split(' ').any(|t| t == signature(&id)));
        }
        assert!(p.text.split(' ').any(|t| t.starts_with("xa")));
    }
}
