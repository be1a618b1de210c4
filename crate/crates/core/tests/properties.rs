use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hierclass::checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
use hierclass::decision::{select, DecisionStrategy, ScoreSpace};
use hierclass::encoder::{pool_cls, pool_concat, pool_mean, write_embeddings, EmbeddingMatrix, EmbeddingStore, Mode, PoolParams};
use hierclass::metrics::{error_taxonomy, macro_prf, micro_prf, Universe};
use hierclass::model::{HeadKind, Model, ModelDims};
use hierclass::synthetic::branching_taxonomy;
use hierclass::Ontology;

/// A `(seq+1) x d` matrix with `n` real tokens and zero padding.
fn matrix(d: usize, seq: usize, n: usize, vals: &[f32]) -> EmbeddingMatrix {
    let mut rows = Array2::zeros((seq + 1, d));
    for r in 0..=n {
        for c in 0..d {
            rows[[r, c]] = vals[(r * d + c) % vals.len()];
        }
    }
    EmbeddingMatrix::new(rows, n).unwrap()
}

fn arb_matrix() -> impl Strategy<Value = EmbeddingMatrix> {
    (1usize..6, 1usize..9)
        .prop_flat_map(|(d, seq)| (Just(d), Just(seq), 0..=seq, prop::collection::vec(-3.0f32..3.0, 1..64)))
        .prop_map(|(d, seq, n, vals)| matrix(d, seq, n, &vals))
}

proptest! {
    #[test]
    fn mean_pooling_ignores_token_order(e in arb_matrix(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let n = e.n_tokens();
        let mut perm: Vec<usize> = (1..=n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut rows = e.rows().clone();
        for (dst, &src) in (1..=n).zip(&perm) {
            rows.row_mut(dst).assign(&e.rows().row(src));
        }
        let shuffled = EmbeddingMatrix::new(rows, n).unwrap();
        let a = pool_mean::<f64>(&e).values;
        let b = pool_mean::<f64>(&shuffled).values;
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_blocks_follow_sentinels(d in 1usize..5, seq in 1usize..10, n_frac in 0.0f64..=1.0, k_frac in 0.0f64..=1.0) {
        let n = (n_frac * seq as f64).round() as usize;
        let k = (k_frac * seq as f64).round() as usize;
        // token row `pos` holds the value `pos`, CLS holds 0.5
        let mut rows = Array2::zeros((seq + 1, d));
        rows.row_mut(0).fill(0.5);
        for pos in 1..=n {
            rows.row_mut(pos).fill(pos as f32);
        }
        let e = EmbeddingMatrix::new(rows, n).unwrap();
        let v = pool_concat::<f64>(&e, &PoolParams::identity(d, k), Mode::Eval).unwrap().values;
        prop_assert_eq!(v.len(), d * (k + 2));
        for c in 0..d {
            prop_assert!((v[c] - 0.5f64.tanh()).abs() < 1e-12);
        }
        for pos in 1..=k {
            let want = if pos <= n { pos as f64 } else { 0.0 };
            prop_assert!(v.slice(ndarray::s![pos * d..(pos + 1) * d]).iter().all(|&x| x == want));
        }
        let tail = if n > k { (k + 1..=n).sum::<usize>() as f64 / (n - k) as f64 } else { 0.0 };
        prop_assert!(v.slice(ndarray::s![(k + 1) * d..]).iter().all(|&x| (x - tail).abs() < 1e-9));
    }

    #[test]
    fn decision_strategies_nest(scores in prop::collection::vec(-5.0f64..5.0, 12), t1 in -6.0f64..6.0, dt in 0.0f64..4.0) {
        let o = branching_taxonomy(&[3, 4]);
        for space in [ScoreSpace::Leaves, ScoreSpace::AllLabels] {
            let s = Array1::from(scores[..space.len(&o).min(12)].to_vec());
            if s.len() != space.len(&o) {
                continue;
            }
            let lo = select(s.view(), &DecisionStrategy::threshold(t1), &o, space).unwrap();
            let hi = select(s.view(), &DecisionStrategy::threshold(t1 + dt), &o, space).unwrap();
            let twm = select(s.view(), &DecisionStrategy::threshold_with_max(t1), &o, space).unwrap();
            let max = select(s.view(), &DecisionStrategy::max_score(), &o, space).unwrap();
            prop_assert!(hi.is_subset(&lo));
            prop_assert_eq!(max.len(), 1);
            prop_assert!(!twm.is_empty());
            let want = if lo.is_empty() { &max } else { &lo };
            prop_assert_eq!(&twm, want);
        }
    }

    #[test]
    fn metrics_are_bounded_and_order_free(
        raw in prop::collection::vec((prop::collection::btree_set(0u8..6, 0..4), prop::collection::btree_set(0u8..6, 0..4)), 1..10)
    ) {
        let micro = micro_prf(&raw).unwrap();
        let mac = macro_prf(&raw, &Universe::Observed).unwrap().mean;
        for x in [micro.precision, micro.recall, micro.f1, mac.precision, mac.recall, mac.f1] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        let mut rev = raw.clone();
        rev.reverse();
        prop_assert_eq!(micro_prf(&rev).unwrap(), micro);
        let perfect: Vec<(BTreeSet<u8>, BTreeSet<u8>)> = raw.iter().map(|(_, g)| (g.clone(), g.clone())).collect();
        let t = error_taxonomy(&perfect).unwrap();
        prop_assert_eq!(t.correct, raw.len() as u64);
        if perfect.iter().any(|(_, g)| !g.is_empty()) {
            prop_assert_eq!(micro_prf(&perfect).unwrap().f1, 1.0);
            prop_assert_eq!(macro_prf(&perfect, &Universe::Observed).unwrap().mean.f1, 1.0);
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), head in 0usize..3) {
        let o = branching_taxonomy(&[2, 2, 2]);
        let dims = ModelDims { d: 3, seq: 4, first_k: 2, hidden: 3, dropout: 0.2 };
        let (head, pooling) = [
            (HeadKind::LinearLeaf, hierclass::encoder::Pooling::Mean),
            (HeadKind::MultiLevel, hierclass::encoder::Pooling::Concat),
            (HeadKind::Gru, hierclass::encoder::Pooling::Cls),
        ][head];
        let m = Model::<f32>::init(head, pooling, &dims, &o, seed);
        let h = CheckpointHeader { head, pooling, dims, step: seed % 1000, config: serde_json::json!({}) };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, &o, &h).unwrap();
        let (back, h2) = read_checkpoint(&buf[..], &o).unwrap();
        prop_assert_eq!(h2, h);
        for ((na, a), (nb, b)) in m.tensors().iter().zip(back.tensors().iter()) {
            prop_assert_eq!(na, nb);
            prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn emb1_round_trip(mats in prop::collection::vec(arb_matrix(), 1..5)) {
        // force a shared geometry
        let (d, seq) = (mats[0].d(), mats[0].seq());
        let mats: Vec<EmbeddingMatrix> = mats
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let vals: Vec<f32> = m.rows().iter().copied().collect();
                matrix(d, seq, (i * 3) % (seq + 1), &vals)
            })
            .collect();
        let langs = ["en", "ja", "zh-hans"];
        let records: Vec<(u64, &str, &EmbeddingMatrix)> =
            mats.iter().enumerate().map(|(i, m)| (i as u64 + 10, langs[i % 3], m)).collect();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, d, seq, &records).unwrap();
        let store = EmbeddingStore::from_bytes(buf).unwrap();
        prop_assert_eq!(store.len(), mats.len());
        for (id, lang, m) in records {
            prop_assert_eq!(&store.get(lang, id).unwrap(), m);
        }
        prop_assert!(store.get("en", 9999).is_err());
    }
}

#[test]
fn dropout_preserves_the_expectation() {
    let d = 6;
    let mut rows = Array2::zeros((3, d));
    for c in 0..d {
        rows[[0, c]] = 0.3 + 0.2 * c as f32;
    }
    let e = EmbeddingMatrix::new(rows, 0).unwrap();
    let mut p = PoolParams::<f64>::identity(d, 1);
    p.dropout = 0.3;
    let eval = pool_cls(&e, &p, Mode::Eval).unwrap().values;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 100_000;
    let mut sum = Array1::<f64>::zeros(d);
    for _ in 0..draws {
        sum += &pool_cls(&e, &p, Mode::Train(&mut rng)).unwrap().values;
    }
    for (s, v) in sum.iter().zip(eval.iter()) {
        let mean = s / draws as f64;
        assert!(((mean - v) / v).abs() < 0.01, "mean {mean} vs eval {v}");
    }
}

#[test]
fn ontology_loaded_from_tsv_matches_builder() {
    let o = branching_taxonomy(&[2, 3]);
    let back = Ontology::parse(&o.to_tsv()).unwrap();
    assert_eq!(back.labels(), o.labels());
    assert_eq!(back.fingerprint(), o.fingerprint());
}
