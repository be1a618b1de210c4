use std::collections::BTreeSet;

use ndarray::ArrayView1;

use crate::numeric::Real;
use crate::ontology::{Ontology, OntologyError};

/// Follows the highest-scoring child from `label` down to a leaf. Ties go to
/// the lower index.
pub fn best_leaf_descendant<F: Real>(scores: ArrayView1<'_, F>, label: usize, o: &Ontology) -> usize {
    let mut cur = label;
    loop {
        let children = o.children_of(cur);
        let Some(&first) = children.first() else {
            return cur;
        };
        let mut best = first;
        for &c in &children[1..] {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        cur = best;
    }
}

/// Replaces every internal label of `predicted` by its best leaf descendant.
pub fn resolve_to_leaves<F: Real>(
    scores: ArrayView1<'_, F>,
    predicted: &BTreeSet<usize>,
    o: &Ontology,
) -> Result<BTreeSet<usize>, OntologyError> {
    if scores.len() != o.len() {
        return Err(OntologyError::UnknownLabel(format!(
            "score vector has {} entries for {} labels",
            scores.len(),
            o.len()
        )));
    }
    predicted
        .iter()
        .map(|&p| {
            if p >= o.len() {
                Err(OntologyError::UnknownLabel(format!("index {p}")))
            } else {
                Ok(best_leaf_descendant(scores, p, o))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> Ontology {
        Ontology::parse("1\ta\n1.1\tb\n1.2\tc\n").unwrap()
    }

    // Enumerate every root-to-leaf chain below `label` and keep the one whose
    // choices were locally maximal at each step.
    fn brute(scores: &[f64], label: usize, o: &Ontology) -> usize {
        fn chains(o: &Ontology, l: usize) -> Vec<Vec<usize>> {
            if o.is_leaf(l) {
                return vec![vec![l]];
            }
            o.children_of(l)
                .iter()
                .flat_map(|&c| chains(o, c))
                .map(|mut ch| {
                    ch.insert(0, l);
                    ch
                })
                .collect()
        }
        let greedy = |ch: &Vec<usize>| {
            ch.windows(2).all(|w| {
                o.children_of(w[0])
                    .iter()
                    .all(|&s| scores[s] < scores[w[1]] || (scores[s] == scores[w[1]] && s >= w[1]))
            })
        };
        let found: Vec<_> = chains(o, label).into_iter().filter(greedy).collect();
        assert_eq!(found.len(), 1);
        *found[0].last().unwrap()
    }

    #[test]
    fn leaf_passes_through() {
        let o = Ontology::ene();
        let i = o.index_of(&"1.10.4.1".parse().unwrap()).unwrap();
        let scores = ndarray::Array1::<f64>::zeros(o.len());
        assert_eq!(resolve_to_leaves(scores.view(), &[i].into(), &o).unwrap(), [i].into());
    }

    #[test]
    fn descends_to_best_child() {
        let o = toy();
        let scores = array![0.0, 0.2, 0.9];
        let got = resolve_to_leaves(scores.view(), &[0].into(), &o).unwrap();
        assert_eq!(got, [brute(scores.as_slice().unwrap(), 0, &o)].into());
        assert_eq!(got, [2].into());
        let dedup = resolve_to_leaves(scores.view(), &[0, 2].into(), &o).unwrap();
        assert_eq!(dedup, [2].into());
    }

    #[test]
    fn ties_break_low() {
        let o = toy();
        let scores = array![0.0, 0.5, 0.5];
        assert_eq!(best_leaf_descendant(scores.view(), 0, &o), 1);
    }

    #[test]
    fn brute_force_agreement_on_ene() {
        let o = Ontology::ene();
        let mut state = 99u64;
        for _ in 0..50 {
            let scores: Vec<f64> = (0..o.len())
                .map(|_| {
                    state = crate::hashing::splitmix64(state);
                    (state % 7) as f64
                })
                .collect();
            let view = ndarray::ArrayView1::from(&scores[..]);
            for &r in o.roots() {
                assert_eq!(best_leaf_descendant(view, r, &o), brute(&scores, r, &o));
            }
        }
    }
}
