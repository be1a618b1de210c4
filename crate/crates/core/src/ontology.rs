//! Label taxonomy over dotted-decimal IDs.
//!
//! The hierarchy is implied by the IDs themselves: the parent of `1.5.1` is
//! `1.5`. Leafness is structural (a label without children), so leaves may
//! sit at any depth.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::hashing::fnv1a64;

/// Depth of the Extended Named Entity hierarchy.
pub const DEFAULT_MAX_DEPTH: usize = 4;

/// The bundled Extended Named Entity taxonomy (268 labels, 193 leaves).
pub const ENE_TSV: &str = include_str!("../data/ene.tsv");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OntologyError {
    #[error("duplicate label id {0}")]
    DuplicateId(String),
    #[error("label {0} has no parent in the ontology")]
    OrphanLabel(String),
    #[error("malformed label id {id:?}: {reason}")]
    MalformedId { id: String, reason: String },
    #[error("ontology is empty")]
    EmptyOntology,
    #[error("unknown label {0}")]
    UnknownLabel(String),
    #[error("gold label {0} is not a leaf")]
    NonLeafGold(String),
}

/// A dotted-decimal label identifier such as `1.5.1.1`.
///
/// Ordering is lexicographic over the integer segments, which is also the
/// dense index order used by [`Ontology`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelId {
    segments: Vec<u32>,
}

impl LabelId {
    pub fn new(segments: Vec<u32>) -> Result<Self, OntologyError> {
        if segments.is_empty() {
            return Err(OntologyError::MalformedId {
                id: String::new(),
                reason: "no segments".into(),
            });
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[u32] {
        &self.segments
    }

    pub fn depth(&self) -> usize {
        self.segments.len()
    }

    pub fn parent(&self) -> Option<LabelId> {
        if self.segments.len() <= 1 {
            None
        } else {
            Some(LabelId {
                segments: self.segments[..self.segments.len() - 1].to_vec(),
            })
        }
    }

    /// True when `self` is a strict dotted prefix of `other`.
    pub fn is_ancestor_of(&self, other: &LabelId) -> bool {
        self.segments.len() < other.segments.len()
            && other.segments.starts_with(&self.segments)
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for s in &self.segments {
            if !first {
                f.write_str(".")?;
            }
            write!(f, "{s}")?;
            first = false;
        }
        Ok(())
    }
}

impl FromStr for LabelId {
    type Err = OntologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = |reason: &str| OntologyError::MalformedId {
            id: s.to_string(),
            reason: reason.to_string(),
        };
        if s.is_empty() {
            return Err(malformed("empty id"));
        }
        let mut segments = Vec::new();
        for part in s.split('.') {
            if part.is_empty() || !part.bytes().all(|b| b.is_ascii_digit()) {
                return Err(malformed("segments must be non-negative integers"));
            }
            // "01" would not round-trip through Display.
            if part.len() > 1 && part.starts_with('0') {
                return Err(malformed("leading zero in segment"));
            }
            let v: u32 = part.parse().map_err(|_| malformed("segment out of range"))?;
            segments.push(v);
        }
        Ok(LabelId { segments })
    }
}

impl serde::Serialize for LabelId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for LabelId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Immutable taxonomy with dense index maps.
///
/// `full` indices enumerate every label in segment-lexicographic order;
/// `leaf` indices enumerate leaves in the same relative order.
#[derive(Debug, Clone)]
pub struct Ontology {
    labels: Vec<LabelId>,
    names: Vec<String>,
    index: HashMap<LabelId, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    roots: Vec<usize>,
    leaves: Vec<usize>,
    leaf_of_full: Vec<Option<usize>>,
    max_depth: usize,
    fingerprint: u64,
}

impl Ontology {
    /// Parses `id<TAB>name` lines with the default maximum depth of 4.
    pub fn parse(text: &str) -> Result<Self, OntologyError> {
        Self::parse_with_depth(text, DEFAULT_MAX_DEPTH)
    }

    pub fn parse_with_depth(text: &str, max_depth: usize) -> Result<Self, OntologyError> {
        let mut entries: Vec<(LabelId, String)> = Vec::new();
        let mut seen: HashMap<LabelId, ()> = HashMap::new();
        for raw in text.lines() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (id_str, name) = match line.split_once('\t') {
                Some((id, name)) => (id.trim(), name.trim()),
                None => match line.trim().split_once(char::is_whitespace) {
                    Some((id, name)) => (id, name.trim()),
                    None => (line.trim(), ""),
                },
            };
            let id: LabelId = id_str.parse()?;
            if id.depth() > max_depth {
                return Err(OntologyError::MalformedId {
                    id: id_str.to_string(),
                    reason: format!("depth {} exceeds maximum {max_depth}", id.depth()),
                });
            }
            if seen.insert(id.clone(), ()).is_some() {
                return Err(OntologyError::DuplicateId(id_str.to_string()));
            }
            entries.push((id, name.to_string()));
        }
        if entries.is_empty() {
            return Err(OntologyError::EmptyOntology);
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));

        let labels: Vec<LabelId> = entries.iter().map(|(id, _)| id.clone()).collect();
        let names: Vec<String> = entries.into_iter().map(|(_, n)| n).collect();
        let index: HashMap<LabelId, usize> =
            labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();

        let mut parent = vec![None; labels.len()];
        let mut children = vec![Vec::new(); labels.len()];
        let mut roots = Vec::new();
        for (i, label) in labels.iter().enumerate() {
            match label.parent() {
                None => roots.push(i),
                Some(p) => {
                    let pi = *index
                        .get(&p)
                        .ok_or_else(|| OntologyError::OrphanLabel(label.to_string()))?;
                    parent[i] = Some(pi);
                    // labels are sorted, so children arrive in segment order
                    children[pi].push(i);
                }
            }
        }

        let mut leaves = Vec::new();
        let mut leaf_of_full = vec![None; labels.len()];
        for (i, ch) in children.iter().enumerate() {
            if ch.is_empty() {
                leaf_of_full[i] = Some(leaves.len());
                leaves.push(i);
            }
        }

        let mut canonical = String::new();
        for (l, n) in labels.iter().zip(&names) {
            canonical.push_str(&format!("{l}\t{n}\n"));
        }
        let fingerprint = fnv1a64(canonical.as_bytes());

        Ok(Self {
            labels,
            names,
            index,
            parent,
            children,
            roots,
            leaves,
            leaf_of_full,
            max_depth,
            fingerprint,
        })
    }

    /// The bundled ENE taxonomy.
    pub fn ene() -> Self {
        Self::parse(ENE_TSV).expect("bundled ENE taxonomy is well formed")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Hash of the canonical (sorted) taxonomy text; stored in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn labels(&self) -> &[LabelId] {
        &self.labels
    }

    pub fn label(&self, full: usize) -> &LabelId {
        &self.labels[full]
    }

    pub fn name(&self, full: usize) -> &str {
        &self.names[full]
    }

    pub fn index_of(&self, id: &LabelId) -> Result<usize, OntologyError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| OntologyError::UnknownLabel(id.to_string()))
    }

    pub fn contains(&self, id: &LabelId) -> bool {
        self.index.contains_key(id)
    }

    pub fn parent_of(&self, full: usize) -> Option<usize> {
        self.parent[full]
    }

    pub fn children_of(&self, full: usize) -> &[usize] {
        &self.children[full]
    }

    pub fn children(&self, id: &LabelId) -> Result<Vec<LabelId>, OntologyError> {
        let i = self.index_of(id)?;
        Ok(self.children[i].iter().map(|&c| self.labels[c].clone()).collect())
    }

    /// Depth-1 labels in index order.
    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn is_leaf(&self, full: usize) -> bool {
        self.children[full].is_empty()
    }

    /// Full indices of the leaves, in leaf-index order.
    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn leaf_to_full(&self, leaf: usize) -> usize {
        self.leaves[leaf]
    }

    pub fn full_to_leaf(&self, full: usize) -> Option<usize> {
        self.leaf_of_full[full]
    }

    pub fn depth_of(&self, full: usize) -> usize {
        self.labels[full].depth()
    }

    /// Root-to-label chain of full indices, inclusive.
    pub fn ancestor_indices(&self, full: usize) -> Vec<usize> {
        let mut chain = vec![full];
        let mut cur = full;
        while let Some(p) = self.parent[cur] {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        chain
    }

    pub fn ancestors(&self, id: &LabelId) -> Result<Vec<LabelId>, OntologyError> {
        let i = self.index_of(id)?;
        Ok(self
            .ancestor_indices(i)
            .into_iter()
            .map(|a| self.labels[a].clone())
            .collect())
    }

    /// Mask over full indices that is true exactly at the direct children of
    /// `from`, or at the depth-1 labels when `from` is `None` (the start of a
    /// decode).
    pub fn child_mask_idx(&self, from: Option<usize>) -> Vec<bool> {
        let mut mask = vec![false; self.labels.len()];
        let set = match from {
            None => &self.roots,
            Some(i) => &self.children[i],
        };
        for &c in set {
            mask[c] = true;
        }
        mask
    }

    pub fn child_mask(&self, from: Option<&LabelId>) -> Result<Vec<bool>, OntologyError> {
        let from = from.map(|id| self.index_of(id)).transpose()?;
        Ok(self.child_mask_idx(from))
    }

    /// Ancestor closure of a leaf gold set.
    pub fn expand_gold(&self, gold: &BTreeSet<LabelId>) -> Result<BTreeSet<LabelId>, OntologyError> {
        let idx = self.gold_indices(gold)?;
        Ok(self
            .expand_indices(&idx)
            .into_iter()
            .map(|i| self.labels[i].clone())
            .collect())
    }

    /// Ancestor closure over full indices.
    pub fn expand_indices(&self, gold: &BTreeSet<usize>) -> BTreeSet<usize> {
        gold.iter()
            .flat_map(|&g| self.ancestor_indices(g))
            .collect()
    }

    /// Resolves a gold set to full indices, rejecting unknown and internal labels.
    pub fn gold_indices(&self, gold: &BTreeSet<LabelId>) -> Result<BTreeSet<usize>, OntologyError> {
        gold.iter()
            .map(|g| {
                let i = self.index_of(g)?;
                if !self.is_leaf(i) {
                    return Err(OntologyError::NonLeafGold(g.to_string()));
                }
                Ok(i)
            })
            .collect()
    }

    /// Canonical TSV rendering (index order).
    pub fn to_tsv(&self) -> String {
        self.labels
            .iter()
            .zip(&self.names)
            .map(|(l, n)| format!("{l}\t{n}\n"))
            .collect()
    }
}
