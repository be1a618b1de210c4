use hierclass::checkpoint::{write_checkpoint, CheckpointHeader};
use hierclass::corpus::{split, Page, SplitCorpus};
use hierclass::encoder::{EmbeddingMatrix, EmbeddingProvider, EncoderError, HashEncoder, Pooling};
use hierclass::model::{HeadKind, Model, ModelDims};
use hierclass::synthetic::{generate, SyntheticConfig};
use hierclass::trainer::{train, TrainConfig, TrainError};
use hierclass::Ontology;

const ENC: HashEncoder = HashEncoder { d: 8, seq: 12, seed: 1 };

fn small() -> (Ontology, SplitCorpus, Vec<String>) {
    let syn = generate(&SyntheticConfig {
        branching: vec![2, 3],
        pages_per_lang: 60,
        ..Default::default()
    });
    let langs = syn.manifest.config.langs.clone();
    let sp = split(&syn.pages, 0, 0.8);
    (syn.ontology, sp, langs)
}

fn config(head: HeadKind, pooling: Pooling, threads: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(head, pooling);
    cfg.lr_max = 0.01;
    cfg.warmup_steps = 5;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.eval_every = 0;
    cfg.n_slices = 3;
    cfg.threads = threads;
    cfg.dims = ModelDims {
        d: 8,
        seq: 12,
        first_k: 3,
        hidden: 6,
        dropout: 0.2,
    };
    cfg
}

fn bytes(cfg: &TrainConfig, model: &Model<f32>, o: &Ontology, steps: u64) -> Vec<u8> {
    let h = CheckpointHeader {
        head: cfg.head,
        pooling: cfg.pooling,
        dims: cfg.dims,
        step: steps,
        config: serde_json::to_value(cfg).unwrap(),
    };
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, o, &h).unwrap();
    buf
}

fn run(cfg: &TrainConfig) -> Vec<u8> {
    let (o, sp, langs) = small();
    let out = train(cfg, &sp, &langs, &o, &ENC, &mut |_, _, _| Ok(())).unwrap();
    assert!(out.mean_loss_last_epoch.is_finite());
    bytes(cfg, &out.model, &o, out.steps)
}

/// Raw parameter bits, leaving out the header (which echoes `threads`).
fn weights(cfg: &TrainConfig) -> Vec<u32> {
    let (o, sp, langs) = small();
    let out = train(cfg, &sp, &langs, &o, &ENC, &mut |_, _, _| Ok(())).unwrap();
    out.model.tensors().iter().flat_map(|(_, t)| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn same_seed_same_bytes() {
    for (head, pooling) in [
        (HeadKind::LinearLeaf, Pooling::Mean),
        (HeadKind::MultiLevel, Pooling::Cls),
        (HeadKind::Gru, Pooling::Concat),
    ] {
        let cfg = config(head, pooling, 1);
        assert_eq!(run(&cfg), run(&cfg), "{head}");
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(run(&cfg), run(&other), "{head}: the seed has no effect");
    }
}

#[test]
fn thread_count_does_not_change_the_result() {
    // any count above one reduces per-sample gradients in the same order
    for head in [HeadKind::MultiLevel, HeadKind::Gru] {
        let two = weights(&config(head, Pooling::Cls, 2));
        let four = weights(&config(head, Pooling::Cls, 4));
        assert_eq!(two, four, "{head}");
    }
}

#[test]
fn eval_callback_sees_every_interval() {
    let (o, sp, langs) = small();
    let mut cfg = config(HeadKind::LinearLeaf, Pooling::Cls, 1);
    cfg.eval_every = 7;
    let mut seen = Vec::new();
    let out = train(&cfg, &sp, &langs, &o, &ENC, &mut |step, records, _| {
        assert!(!records.is_empty());
        seen.push(step);
        Ok(())
    })
    .unwrap();
    assert!(seen.windows(2).all(|w| w[1] > w[0]));
    assert!(seen[..seen.len() - 1].iter().all(|s| s % 7 == 0));
    assert_eq!(*seen.last().unwrap(), out.steps);
}

/// Embeddings so large that every logit overflows.
struct Overflow;

impl EmbeddingProvider for Overflow {
    fn embed(&self, _: &Page) -> Result<EmbeddingMatrix, EncoderError> {
        let mut rows = ndarray::Array2::zeros((13, 8));
        rows.row_mut(0).fill(f32::MAX);
        rows.row_mut(1).fill(f32::MAX);
        EmbeddingMatrix::new(rows, 1)
    }

    fn d(&self) -> usize {
        8
    }

    fn seq(&self) -> usize {
        12
    }
}

#[test]
fn non_finite_loss_is_reported() {
    let (o, sp, langs) = small();
    let cfg = config(HeadKind::LinearLeaf, Pooling::Mean, 1);
    let err = train(&cfg, &sp, &langs, &o, &Overflow, &mut |_, _, _| Ok(())).unwrap_err();
    // steps count from 1
    assert!(matches!(err, TrainError::NonFiniteLoss { batch: 1 }), "{err}");
}

#[test]
fn provider_geometry_must_match() {
    let (o, sp, langs) = small();
    let cfg = config(HeadKind::LinearLeaf, Pooling::Mean, 1);
    let wrong = HashEncoder { d: 4, seq: 12, seed: 0 };
    let err = train(&cfg, &sp, &langs, &o, &wrong, &mut |_, _, _| Ok(())).unwrap_err();
    assert!(matches!(err, TrainError::Config(_)));
}
