//! Command-line entry point. Exit status: 0 on success, 1 on invalid input
//! or configuration, 2 on runtime failure.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointHeader};
use crate::config::{parse_override, ConfigError, EmbeddingsConfig, RunConfig, Subset};
use crate::corpus::{load_corpus, split, write_corpus, CorpusError, Page};
use crate::decision::DecisionError;
use crate::encoder::{EmbeddingProvider, EmbeddingStore, EncoderError, HashEncoder};
use crate::heads::HeadError;
use crate::metrics::{error_taxonomy, macro_prf, worst_labels, ErrorBreakdown, MetricsError, Pair, Universe};
use crate::model::Model;
use crate::ontology::{LabelId, Ontology, OntologyError};
use crate::pipeline::{
    decide, metrics_by_lang, read_predictions, score_pages, tune_per_language, write_predictions, MetricsRecord,
    PredictionRecord, ThresholdTable,
};
use crate::synthetic::generate;
use crate::trainer::{grad_check, train, GradCheckComponent, TrainError};

#[derive(Debug, Parser)]
#[command(name = "hierclass", version, about = "Hierarchical multi-label text classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr_max=0.01`. Repeatable;
    /// applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads for per-sample work (default 1, fully deterministic).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints, a metrics log and the effective config.
    Train(Common),
    /// Score a predictions file against the corpus gold labels.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Write predictions for the configured page subset.
    Predict(Common),
    /// Tune one logit threshold per language on the dev pages.
    TuneThreshold(Common),
    /// Per-language error breakdown and weakest labels of a predictions file.
    ErrorAnalysis {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Generate a synthetic taxonomy and corpus with planted labels.
    GenSynthetic(Common),
    /// Finite-difference check of the backward passes.
    GradCheck {
        /// One component, or all when omitted.
        #[arg(long)]
        component: Option<String>,
        #[arg(long, default_value_t = 25)]
        trials: usize,
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 8)]
        h: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fail (exit 2) when the maximum relative error reaches this.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<OntologyError> for CliError {
    fn from(e: OntologyError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DecisionError> for CliError {
    fn from(e: DecisionError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Ontology(_) | TrainError::Decision(_) | TrainError::Metrics(_) => {
                CliError::Validation(e.to_string())
            }
            TrainError::Corpus(c) => c.into(),
            TrainError::Encoder(c) => c.into(),
            TrainError::Head(HeadError::InvalidPath(_) | HeadError::Ontology(_)) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(c) => cmd_train(&load(&c, None)?.cfg),
        Command::Eval { common, predictions } => cmd_eval(&load(&common, predictions)?.cfg),
        Command::Predict(c) => cmd_predict(&load(&c, None)?),
        Command::TuneThreshold(c) => cmd_tune(&load(&c, None)?),
        Command::ErrorAnalysis { common, predictions } => cmd_error_analysis(&load(&common, predictions)?.cfg),
        Command::GenSynthetic(c) => cmd_gen_synthetic(&load(&c, None)?.cfg),
        Command::GradCheck {
            component,
            trials,
            d,
            h,
            eps,
            seed,
            tolerance,
        } => cmd_grad_check(component.as_deref(), trials, d, h, eps, seed, tolerance),
    }
}

/// A loaded configuration plus the worker count.
struct Run {
    cfg: RunConfig,
    threads: usize,
}

/// Config file, then `--set` overrides, then the dedicated flags. The thread
/// count comes from `--threads`, else `train.threads`, else 1.
fn load(c: &Common, predictions: Option<PathBuf>) -> Result<Run, CliError> {
    let mut overrides = c.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(o) = &c.out {
        overrides.push(("out_dir".into(), json!(o)));
    }
    if let Some(p) = predictions {
        overrides.push(("predictions".into(), json!(p)));
    }
    let mut cfg = RunConfig::load(c.config.as_deref(), &overrides)?;
    if c.threads == Some(0) {
        return Err(CliError::Validation("--threads must be positive".into()));
    }
    let threads = c.threads.or(cfg.train.as_ref().map(|t| t.threads)).unwrap_or(1);
    if let Some(t) = cfg.train.as_mut() {
        t.threads = threads;
    }
    Ok(Run { cfg, threads })
}

fn ontology(cfg: &RunConfig) -> Result<Ontology, CliError> {
    match &cfg.ontology {
        Some(p) => Ok(Ontology::parse(&fs::read_to_string(p)?)?),
        None => Ok(Ontology::ene()),
    }
}

fn provider(cfg: &RunConfig) -> Result<Box<dyn EmbeddingProvider>, CliError> {
    match &cfg.embeddings {
        EmbeddingsConfig::Hash { d, seq, seed } => Ok(Box::new(HashEncoder {
            d: *d,
            seq: *seq,
            seed: *seed,
        })),
        EmbeddingsConfig::File { path } => Ok(Box::new(EmbeddingStore::open(path)?)),
    }
}

fn corpus(cfg: &RunConfig, o: &Ontology) -> Result<Vec<Page>, CliError> {
    let path = cfg.corpus.as_ref().ok_or(ConfigError::Required("corpus".into()))?;
    Ok(load_corpus(path, o)?)
}

fn subset(cfg: &RunConfig, pages: &[Page]) -> Vec<Page> {
    let s = split(pages, cfg.split.seed, cfg.split.train_ratio);
    match cfg.subset {
        Subset::Dev => s.dev,
        Subset::Train => s.train,
        Subset::All => {
            let mut all = s.train;
            all.extend(s.dev);
            all.sort_by(|a, b| (&a.lang, a.page_id).cmp(&(&b.lang, b.page_id)));
            all
        }
    }
}

fn checkpoint(cfg: &RunConfig, o: &Ontology) -> Result<(Model<f32>, CheckpointHeader), CliError> {
    let path = cfg.checkpoint.as_ref().ok_or(ConfigError::Required("checkpoint".into()))?;
    Ok(load_checkpoint(path, o)?)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out_dir)?;
    let effective = serde_json::to_string_pretty(&cfg.echo())?;
    fs::write(cfg.out_dir.join("effective_config.json"), effective + "\n")?;
    Ok(cfg.out_dir.clone())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let tcfg = cfg.train.as_ref().ok_or(ConfigError::Required("train".into()))?;
    let o = ontology(cfg)?;
    let pages = corpus(cfg, &o)?;
    let prov = provider(cfg)?;
    let sp = split(&pages, cfg.split.seed, cfg.split.train_ratio);
    let dir = out_dir(cfg)?;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let echo = cfg.echo();
    let header = |step: u64| CheckpointHeader {
        head: tcfg.head,
        pooling: tcfg.pooling,
        dims: tcfg.dims,
        step,
        config: echo.clone(),
    };
    let mut log = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let mut on_eval = |step: u64, recs: &[MetricsRecord], model: &Model<f32>| -> Result<(), TrainError> {
        for r in recs {
            serde_json::to_writer(&mut log, r).map_err(|e| TrainError::Runtime(e.to_string()))?;
            log.write_all(b"\n")?;
        }
        log.flush()?;
        save_checkpoint(&ckpt_dir.join(format!("step-{step:08}.hck")), model, &o, &header(step))
            .map_err(|e| TrainError::Runtime(e.to_string()))?;
        if let Some(all) = recs.iter().find(|r| r.lang == "all") {
            eprintln!("step {step}: dev macro F1 {:.4}, micro F1 {:.4}", all.macro_f1, all.micro_f1);
        }
        Ok(())
    };
    let outcome = train(tcfg, &sp, &cfg.langs, &o, prov.as_ref(), &mut on_eval)?;
    save_checkpoint(&dir.join("model.hck"), &outcome.model, &o, &header(outcome.steps))?;
    println!(
        "trained {} steps ({} parameters), final epoch mean loss {:.6}; wrote {}",
        outcome.steps,
        outcome.model.n_params(),
        outcome.mean_loss_last_epoch,
        dir.join("model.hck").display()
    );
    Ok(())
}

fn thresholds(cfg: &RunConfig) -> Result<ThresholdTable, CliError> {
    match &cfg.strategy.thresholds {
        Some(p) => {
            let v: Value = serde_json::from_reader(BufReader::new(File::open(p)?))?;
            let table = v.get("table").cloned().unwrap_or(v);
            Ok(serde_json::from_value(table)?)
        }
        None => Ok(ThresholdTable::uniform(cfg.strategy.theta)),
    }
}

fn cmd_predict(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let o = ontology(cfg)?;
    let (model, _) = checkpoint(cfg, &o)?;
    let pages = subset(cfg, &corpus(cfg, &o)?);
    let prov = provider(cfg)?;
    let outputs = score_pages(&model, &pages, prov.as_ref(), &o, run.threads)?;
    let table = thresholds(cfg)?;
    let preds = decide(&outputs, &pages, &model, &o, cfg.strategy.kind, &table)?;
    let records: Vec<PredictionRecord> = pages
        .iter()
        .zip(&preds)
        .zip(&outputs)
        .map(|((p, labels), out)| PredictionRecord::new(p, labels, cfg.strategy.scores.then_some(out), &model, &o))
        .collect();
    let dir = out_dir(cfg)?;
    let path = dir.join("predictions.jsonl");
    let mut w = BufWriter::new(File::create(&path)?);
    write_predictions(&mut w, &records)?;
    w.flush()?;
    println!("wrote {} predictions to {}", records.len(), path.display());
    Ok(())
}

fn cmd_tune(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let o = ontology(cfg)?;
    let (model, header) = checkpoint(cfg, &o)?;
    let pages = subset(cfg, &corpus(cfg, &o)?);
    let prov = provider(cfg)?;
    let outputs = score_pages(&model, &pages, prov.as_ref(), &o, run.threads)?;
    let table = tune_per_language(&outputs, &pages, &model, &o, cfg.strategy.tune_metric, header.step)?;
    let dir = out_dir(cfg)?;
    fs::write(dir.join("thresholds.tsv"), table.to_tsv())?;
    write_json(&dir.join("thresholds.json"), &json!({"config": cfg.echo(), "table": table}))?;
    print!("{}", table.to_tsv());
    Ok(())
}

/// Pairs predictions with corpus gold labels, grouped by language.
fn paired(cfg: &RunConfig, o: &Ontology) -> Result<BTreeMap<String, Vec<Pair<LabelId>>>, CliError> {
    let path = cfg.predictions.as_ref().ok_or(ConfigError::Required("predictions".into()))?;
    let records = read_predictions(BufReader::new(File::open(path)?))?;
    if records.is_empty() {
        return Err(MetricsError::EmptyInput.into());
    }
    let pages = corpus(cfg, o)?;
    let gold: HashMap<(&str, u64), &BTreeSet<LabelId>> =
        pages.iter().map(|p| ((p.lang.as_str(), p.page_id), &p.gold)).collect();
    let mut out: BTreeMap<String, Vec<Pair<LabelId>>> = BTreeMap::new();
    for r in records {
        let g = *gold.get(&(r.lang.as_str(), r.page_id)).ok_or_else(|| {
            CliError::Validation(format!("prediction for unknown page ({}, {})", r.lang, r.page_id))
        })?;
        for l in &r.labels {
            o.index_of(l)?;
        }
        out.entry(r.lang).or_default().push((r.labels.into_iter().collect(), g.clone()));
    }
    Ok(out)
}

fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let o = ontology(cfg)?;
    let by_lang = paired(cfg, &o)?;
    let mut langs = Vec::new();
    let mut pairs = Vec::new();
    for (lang, ps) in &by_lang {
        for (p, g) in ps {
            langs.push(lang.as_str());
            let idx = |set: &BTreeSet<LabelId>| set.iter().map(|l| o.index_of(l)).collect::<Result<BTreeSet<_>, _>>();
            pairs.push((idx(p)?, idx(g)?));
        }
    }
    let records = metrics_by_lang(0, &langs, &pairs).map_err(CliError::from)?;
    let dir = out_dir(cfg)?;
    write_json(&dir.join("eval.json"), &json!({"config": cfg.echo(), "metrics": records}))?;
    println!("lang\tmicro_p\tmicro_r\tmicro_f1\tmacro_p\tmacro_r\tmacro_f1");
    for r in &records {
        println!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            r.lang, r.micro_p, r.micro_r, r.micro_f1, r.macro_p, r.macro_r, r.macro_f1
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct LangErrors {
    lang: String,
    #[serde(flatten)]
    breakdown: ErrorBreakdown,
    worst_labels: Vec<Value>,
}

fn cmd_error_analysis(cfg: &RunConfig) -> Result<(), CliError> {
    let o = ontology(cfg)?;
    let by_lang = paired(cfg, &o)?;
    let mut reports = Vec::new();
    for (lang, pairs) in &by_lang {
        let breakdown = error_taxonomy(pairs)?;
        // weakest gold-side leaves, as in a per-language worst-label table
        let rows = macro_prf(pairs, &Universe::Observed)?.rows;
        let worst = worst_labels(&rows, 5)
            .into_iter()
            .map(|r| {
                let name = o.index_of(&r.label).map(|i| o.name(i).to_string()).unwrap_or_default();
                json!({"label": r.label, "name": name, "f1": r.prf.f1, "support": r.counts.support()})
            })
            .collect();
        reports.push(LangErrors {
            lang: lang.clone(),
            breakdown,
            worst_labels: worst,
        });
    }
    let mut tsv = String::from("kind");
    for r in &reports {
        tsv.push('\t');
        tsv.push_str(&r.lang);
    }
    tsv.push('\n');
    let rows: [(&str, fn(&ErrorBreakdown) -> u64); 6] = [
        ("#correct", |b| b.correct),
        ("#incorrect", |b| b.incorrect),
        ("#completely incorrect", |b| b.completely_incorrect),
        ("#over-predicted", |b| b.over_predicted),
        ("#under-predicted", |b| b.under_predicted),
        ("#over and under-predicted", |b| b.over_and_under),
    ];
    for (name, get) in rows {
        tsv.push_str(name);
        for r in &reports {
            tsv.push_str(&format!("\t{}", get(&r.breakdown)));
        }
        tsv.push('\n');
    }
    let dir = out_dir(cfg)?;
    fs::write(dir.join("error_analysis.tsv"), &tsv)?;
    write_json(&dir.join("error_analysis.json"), &json!({"config": cfg.echo(), "languages": reports}))?;
    print!("{tsv}");
    Ok(())
}

fn cmd_gen_synthetic(cfg: &RunConfig) -> Result<(), CliError> {
    let s = &cfg.synthetic;
    if s.branching.is_empty() || s.branching.contains(&0) {
        return Err(ConfigError::Invalid {
            path: "synthetic.branching".into(),
            message: "needs at least one level and positive factors".into(),
        }
        .into());
    }
    if !(0.0..=1.0).contains(&s.multi_label_rate) || s.noise_rate < 0.0 || s.noise_vocab == 0 {
        return Err(ConfigError::Invalid {
            path: "synthetic".into(),
            message: "multi_label_rate must lie in [0, 1], noise_rate >= 0, noise_vocab > 0".into(),
        }
        .into());
    }
    if let Some(bad) = s.langs.iter().find(|l| l.is_empty() || !l.bytes().all(|b| b.is_ascii_lowercase())) {
        return Err(ConfigError::Invalid {
            path: "synthetic.langs".into(),
            message: format!("{bad:?} is not a lowercase ASCII code"),
        }
        .into());
    }
    let syn = generate(s);
    let dir = out_dir(cfg)?;
    fs::write(dir.join("taxonomy.tsv"), syn.ontology.to_tsv())?;
    let mut w = BufWriter::new(File::create(dir.join("corpus.jsonl"))?);
    write_corpus(&mut w, &syn.pages)?;
    w.flush()?;
    write_json(&dir.join("manifest.json"), &json!({"config": cfg.echo(), "manifest": syn.manifest}))?;
    println!(
        "wrote {} labels ({} leaves) and {} pages ({} with two gold labels) to {}",
        syn.manifest.n_labels,
        syn.manifest.n_leaves,
        syn.manifest.n_pages,
        syn.manifest.n_multi_label,
        dir.display()
    );
    Ok(())
}

fn cmd_grad_check(
    component: Option<&str>,
    trials: usize,
    d: usize,
    h: usize,
    eps: f64,
    seed: u64,
    tolerance: f64,
) -> Result<(), CliError> {
    let components = match component {
        Some(c) => vec![c.parse::<GradCheckComponent>().map_err(CliError::Validation)?],
        None => GradCheckComponent::ALL.to_vec(),
    };
    let mut failed = Vec::new();
    for c in components {
        let r = grad_check(c, trials, d, h, eps, seed)?;
        println!("{}", serde_json::to_string(&r)?);
        if !(r.max_rel_err < tolerance) {
            failed.push(c.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "relative error at or above {tolerance:e} for {}",
            failed.join(", ")
        )))
    }
}
