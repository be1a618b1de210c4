//! Losses, optimizer, learning-rate schedule and the training loop.

mod adam;
mod gradcheck;
mod loss;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use gradcheck::{grad_check, GradCheckComponent, GradCheckReport};
pub use loss::{bce_with_logits, masked_ce};

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{slice_schedule, CorpusError, Page, SplitCorpus};
use crate::decision::{DecisionError, StrategyKind};
use crate::encoder::{EmbeddingProvider, EncoderError, Mode, Pooling};
use crate::hashing::derive_seed;
use crate::heads::HeadError;
use crate::metrics::MetricsError;
use crate::model::{HeadKind, Model, ModelDims};
use crate::numeric::Real;
use crate::ontology::{Ontology, OntologyError};
use crate::pipeline::{decide, metrics_by_lang, score_pages, MetricsRecord, ThresholdTable};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("logits have {logits} entries, targets {targets}")]
    LengthMismatch { logits: usize, targets: usize },
    #[error("gold label index {0} lies outside the step mask")]
    GoldMasked(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in parameter tensor {0}")]
    NonFiniteGradient(usize),
    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_batch_size() -> usize {
    32
}
fn default_lr_max() -> f64 {
    2e-5
}
fn default_warmup() -> u64 {
    10_000
}
fn default_epochs() -> usize {
    1
}
fn default_eval_every() -> u64 {
    1000
}
fn default_slices() -> usize {
    10
}
fn default_threads() -> usize {
    1
}
fn default_eval_theta() -> f64 {
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    pub head: HeadKind,
    pub pooling: Pooling,
    #[serde(default)]
    pub dims: ModelDims,
    /// Optimizer steps between dev evaluations; 0 evaluates only at the end.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_slices")]
    pub n_slices: usize,
    #[serde(default = "default_threads")]
    pub threads: usize,
    /// Logit threshold used for the dev metrics logged during training.
    #[serde(default = "default_eval_theta")]
    pub eval_theta: f64,
}

impl TrainConfig {
    pub fn new(head: HeadKind, pooling: Pooling) -> Self {
        Self {
            batch_size: default_batch_size(),
            lr_max: default_lr_max(),
            warmup_steps: default_warmup(),
            epochs: default_epochs(),
            seed: 0,
            head,
            pooling,
            dims: ModelDims::default(),
            eval_every: default_eval_every(),
            n_slices: default_slices(),
            threads: default_threads(),
            eval_theta: default_eval_theta(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return bad("lr_max must be a positive finite rate");
        }
        if self.epochs == 0 || self.n_slices == 0 || self.threads == 0 {
            return bad("epochs, n_slices and threads must be positive");
        }
        let d = &self.dims;
        if d.d == 0 || d.seq == 0 || d.hidden == 0 {
            return bad("dims.d, dims.seq and dims.hidden must be positive");
        }
        if !(0.0..=1.0).contains(&d.dropout) {
            return bad("dims.dropout must lie in [0, 1]");
        }
        if self.pooling == Pooling::Concat && d.first_k > d.seq {
            return bad("dims.first_k must not exceed dims.seq");
        }
        if self.head == HeadKind::Gru && self.pooling == Pooling::Mean {
            return bad("the gru head is defined over cls or concat pooling");
        }
        Ok(())
    }
}

/// Linear warm-up to `lr_max`, then constant.
pub fn lr_at(t: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.lr_max;
    }
    cfg.lr_max * (t as f64 / cfg.warmup_steps as f64).min(1.0)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub steps: u64,
    pub log: Vec<MetricsRecord>,
    pub mean_loss_last_epoch: f64,
}

/// Dev metrics for the strategy used while training: ThresholdWithMax at
/// `theta` for linear heads, the decoded path for the GRU head.
pub fn evaluate<F: Real, P: EmbeddingProvider + ?Sized>(
    model: &Model<F>,
    pages: &[Page],
    provider: &P,
    o: &Ontology,
    theta: f64,
    threads: usize,
    step: u64,
) -> Result<Vec<MetricsRecord>, TrainError> {
    let outputs = score_pages(model, pages, provider, o, threads)?;
    let preds = decide(
        &outputs,
        pages,
        model,
        o,
        StrategyKind::ThresholdWithMax,
        &ThresholdTable::uniform(theta),
    )?;
    let pairs = preds
        .into_iter()
        .zip(pages)
        .map(|(p, page)| Ok((p, o.gold_indices(&page.gold)?)))
        .collect::<Result<Vec<_>, TrainError>>()?;
    let langs: Vec<&str> = pages.iter().map(|p| p.lang.as_str()).collect();
    metrics_by_lang(step, &langs, &pairs)
}

/// Trains over the interleaved slice schedule of `split.train` restricted to
/// `langs`. `on_eval` runs after each dev evaluation with the records and
/// the current parameters (used for checkpointing).
pub fn train<P: EmbeddingProvider + ?Sized>(
    cfg: &TrainConfig,
    split: &SplitCorpus,
    langs: &[String],
    o: &Ontology,
    provider: &P,
    on_eval: &mut dyn FnMut(u64, &[MetricsRecord], &Model<f32>) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if provider.d() != cfg.dims.d || provider.seq() != cfg.dims.seq {
        return Err(TrainError::Config(format!(
            "embeddings are seq={} d={}, config says seq={} d={}",
            provider.seq(),
            provider.d(),
            cfg.dims.seq,
            cfg.dims.d
        )));
    }
    let schedule = slice_schedule(split, cfg.n_slices, langs)?;
    let golds: Vec<BTreeSet<usize>> = split
        .train
        .iter()
        .map(|p| o.gold_indices(&p.gold))
        .collect::<Result<_, _>>()?;

    let mut model = Model::<f32>::init(cfg.head, cfg.pooling, &cfg.dims, o, derive_seed(cfg.seed, &[0x1417]));
    let mut grads = model.zeros_like();
    let shapes: Vec<Vec<usize>> = model.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut opt = AdamState::<f32>::new(shapes.iter().map(Vec::as_slice));
    let workers = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| TrainError::Runtime(e.to_string()))?,
        )
    } else {
        None
    };

    let mut step = 0u64;
    let mut log = Vec::new();
    let mut last_eval = None;
    let mut epoch_loss = (0.0f64, 0usize);
    for epoch in 0..cfg.epochs {
        epoch_loss = (0.0, 0);
        for block in &schedule.order {
            for batch in block.batches(cfg.batch_size, epoch, cfg.seed) {
                step += 1;
                let scale = 1.0 / batch.len() as f32;
                let sample = |pos: usize, page: usize, g: &mut Model<f32>| -> Result<f32, TrainError> {
                    let e = provider.embed(&split.train[page])?;
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[step, pos as u64]));
                    model.loss_and_grad(&e, &golds[page], o, Mode::Train(&mut rng), scale, g)
                };
                for (_, mut t) in grads.tensors_mut() {
                    t.fill(0.0);
                }
                let mut batch_loss = 0.0f32;
                match &workers {
                    None => {
                        for (pos, &page) in batch.iter().enumerate() {
                            batch_loss += sample(pos, page, &mut grads)?;
                        }
                    }
                    Some(pool) => {
                        let parts: Vec<Result<(f32, Model<f32>), TrainError>> = pool.install(|| {
                            batch
                                .par_iter()
                                .enumerate()
                                .map(|(pos, &page)| {
                                    let mut g = grads.zeros_like();
                                    sample(pos, page, &mut g).map(|l| (l, g))
                                })
                                .collect()
                        });
                        // fixed-order reduction
                        for part in parts {
                            let (l, g) = part?;
                            batch_loss += l;
                            grads.add_assign(&g);
                        }
                    }
                }
                let batch_loss = batch_loss * scale;
                if !batch_loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { batch: step });
                }
                epoch_loss.0 += batch_loss as f64;
                epoch_loss.1 += 1;

                let lr = lr_at(step, cfg);
                let g_views: Vec<_> = grads.tensors().into_iter().map(|(_, t)| t).collect();
                let mut p_views: Vec<_> = model.tensors_mut().into_iter().map(|(_, t)| t).collect();
                adam_step(&mut p_views, &g_views, &mut opt, lr)?;

                if cfg.eval_every > 0 && step % cfg.eval_every == 0 && !split.dev.is_empty() {
                    let recs = evaluate(&model, &split.dev, provider, o, cfg.eval_theta, cfg.threads, step)?;
                    on_eval(step, &recs, &model)?;
                    log.extend(recs);
                    last_eval = Some(step);
                }
            }
        }
    }
    if last_eval != Some(step) && !split.dev.is_empty() {
        let recs = evaluate(&model, &split.dev, provider, o, cfg.eval_theta, cfg.threads, step)?;
        on_eval(step, &recs, &model)?;
        log.extend(recs);
    }
    Ok(TrainOutcome {
        model,
        steps: step,
        log,
        mean_loss_last_epoch: if epoch_loss.1 == 0 {
            0.0
        } else {
            epoch_loss.0 / epoch_loss.1 as f64
        },
    })
}
