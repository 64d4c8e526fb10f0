//! The `hear` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hear_core::data::dataset::write_synth_dataset;
use hear_core::data::synth::{synth_corpus, SynthCorpusConfig};
use hear_core::data::tokenize;
use hear_core::data::{DialogueInstance, FeatureTrack};
use hear_core::eval::{evaluate, keyword_proportions, Bucket, EvalConfig, EvalReport};
use hear_core::experiment::{desk_train_config, split_clips, Splits, DESK_SPLIT};
use hear_core::sal::{
    build_estimator_labels, train_estimator, write_labeled_jsonl, EstimatorConfig, EstimatorModel, LabelConfig, SalMode,
};
use hear_core::session::Session;
use hear_core::trainer::{prepare_examples, train, TrainConfig, Variant};
use serde::Serialize;

use crate::config::{resolve_run_dir, ConfigError, ConfigFile, EvalSection, ServeSection};
use crate::run::{load_data, load_keywords, load_run, write_json, RunManifest, ESTIMATOR_FILE, MANIFEST_FILE, SPLITS_FILE};
use crate::server::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "hear", version, about = "Audio-aware video-grounded dialogue: data, training, evaluation and serving")]
#[command(after_help = "Relative run directories resolve under $HEAR_RUN_ROOT when it is set.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML, or JSON with a .json extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus in the dataset layout.
    SynthData(SynthArgs),
    /// Build noisy relatedness labels and train the question estimator.
    TrainEstimator(EstimatorArgs),
    /// Train the dialogue model.
    Train(TrainArgs),
    /// Decode a split and score it.
    Eval(EvalArgs),
    /// Answer questions about one clip as a single session.
    Generate(GenerateArgs),
    /// Corpus statistics.
    Analyze(AnalyzeArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub clips: Option<usize>,
    /// Include questions that need both streams.
    #[arg(long)]
    pub mixed_questions: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EstimatorArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory; gets estimator.json.
    #[arg(long)]
    pub out: PathBuf,
    /// One audio keyword per line, replacing the built-in list.
    #[arg(long)]
    pub keywords_file: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    /// Plain concatenation.
    None,
    /// Keyword gating.
    Keyword,
    /// Estimator weighting.
    Estimator,
    /// Estimator plus reconstruction.
    EstimatorRecon,
    /// Estimator plus ranking bound.
    EstimatorRanking,
    /// Estimator, reconstruction and ranking bound.
    Full,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::None => Variant::Baseline,
            VariantArg::Keyword => Variant::Keyword,
            VariantArg::Estimator => Variant::Estimator,
            VariantArg::EstimatorRecon => Variant::EstimatorReconstruction,
            VariantArg::EstimatorRanking => Variant::EstimatorRanking,
            VariantArg::Full => Variant::Full,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    pub variant: VariantArg,
    /// Estimator checkpoint; defaults to estimator.json in the run directory if present.
    #[arg(long)]
    pub estimator: Option<PathBuf>,
    #[arg(long)]
    pub keywords_file: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BucketArg {
    All,
    Keyword,
    Audio,
}

impl From<BucketArg> for Bucket {
    fn from(b: BucketArg) -> Self {
        match b {
            BucketArg::All => Bucket::All,
            BucketArg::Keyword => Bucket::Keyword,
            BucketArg::Audio => Bucket::Audio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// `best`, `last`, or a checkpoint file.
    #[arg(long, default_value = "best")]
    pub checkpoint: String,
    #[arg(long, value_enum, default_value_t = BucketArg::All)]
    pub bucket: BucketArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Report path; defaults to eval-<checkpoint>-<split>-<bucket>.json in the run directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Read clips from here instead of the training data directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "best")]
    pub checkpoint: String,
    #[arg(long)]
    pub clip: String,
    /// Asked in order within one session.
    #[arg(long = "question", required = true)]
    pub questions: Vec<String>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Share of keyword-positive questions containing each keyword.
    #[arg(long)]
    pub keywords: bool,
    #[arg(long)]
    pub keywords_file: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "best")]
    pub checkpoint: String,
    /// Overrides serve.addr.
    #[arg(long)]
    pub addr: Option<String>,
    /// Overrides serve.journal.
    #[arg(long)]
    pub journal: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::TrainEstimator(a) => estimator(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Generate(a) => generate(a),
        Command::Analyze(a) => analyze(a),
        Command::Serve(a) => serve(a),
    }
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn synth_data(a: SynthArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    let mut cfg = file.section("synth", SynthCorpusConfig::default())?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(c) = a.clips {
        cfg.clips = c;
    }
    cfg.mixed_questions |= a.mixed_questions;
    cfg.validate().map_err(|e| ConfigError::from_core("synth", e))?;
    let corpus = synth_corpus(&cfg)?;
    write_synth_dataset(&a.out, &corpus)?;
    write_json(&a.out.join("synth.json"), &cfg)?;
    let rounds: usize = corpus.clips.iter().map(|c| c.rounds.len()).sum();
    println!("wrote {} clips, {rounds} rounds to {}", corpus.clips.len(), a.out.display());
    Ok(())
}

fn desk_splits(clips: usize, seed: u64) -> anyhow::Result<Splits> {
    Ok(split_clips(clips, DESK_SPLIT.0, DESK_SPLIT.1, seed)?)
}

fn estimator(a: EstimatorArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    let mut labels = file.section("labels", LabelConfig::default())?;
    let mut cfg = file.section("estimator", EstimatorConfig::default())?;
    if let Some(s) = a.common.seed {
        labels.seed = s;
        cfg.seed = s;
    }
    let out = resolve_run_dir(&a.out);
    fs::create_dir_all(&out)?;
    let ds = load_data(&a.data)?;
    let keywords = load_keywords(a.keywords_file.as_deref())?;
    let splits = desk_splits(ds.dialogues.len(), cfg.seed)?;
    // Training clips only, so held-out dialogues stay unseen.
    let questions: Vec<Vec<String>> =
        splits.train.iter().flat_map(|&i| ds.dialogues[i].rounds.iter().map(|(q, _)| tokenize(q))).collect();
    let set = build_estimator_labels(&questions, &keywords, &labels).map_err(|e| ConfigError::from_core("labels", e))?;
    let (model, report) = train_estimator(&set, &keywords, &cfg).map_err(|e| match e {
        hear_core::HearError::Config { field, reason } => ConfigError { path: field, reason }.into(),
        other => anyhow::Error::from(other),
    })?;
    model.save(&out.join(ESTIMATOR_FILE))?;
    write_labeled_jsonl(&out.join("estimator_labels.jsonl"), &set)?;
    write_json(&out.join("estimator_report.json"), &report)?;
    write_json(&out.join("estimator_splits.json"), &splits)?;
    println!(
        "estimator: {} labeled questions, held-out AUC {:.4}; wrote {}",
        set.len(),
        report.holdout_auc,
        out.join(ESTIMATOR_FILE).display()
    );
    Ok(())
}

/// The desk preset with the `[train]` table and `--seed` applied.
pub fn train_config(file: &ConfigFile, seed: Option<u64>) -> anyhow::Result<TrainConfig> {
    let base = desk_train_config(seed.unwrap_or(0));
    let mut cfg = file.section("train", base)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    cfg.validate().map_err(|e| ConfigError::from_core("train", e))?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    let variant: Variant = a.variant.into();
    let cfg = variant.apply(&train_config(&file, a.common.seed)?);
    let out = resolve_run_dir(&a.out);
    fs::create_dir_all(&out)?;
    let ds = load_data(&a.data)?;
    let keywords = load_keywords(a.keywords_file.as_deref())?;
    let estimator_path = match a.estimator {
        Some(p) => Some(p),
        None => Some(out.join(ESTIMATOR_FILE)).filter(|p| p.exists()),
    };
    let estimator = match &estimator_path {
        Some(p) => Some(EstimatorModel::load(p).with_context(|| format!("loading estimator {}", p.display()))?),
        None => None,
    };
    if estimator.is_none() && matches!(cfg.sal_mode, SalMode::Estimator | SalMode::Both) {
        log::warn!("no estimator given; relatedness falls back to the keyword verdict (r = 0 or 1)");
    }
    let splits = desk_splits(ds.dialogues.len(), cfg.seed)?;
    let vocab = ds.build_vocab(&keywords);
    let prep = |idx: &[usize]| {
        prepare_examples(ds.items(idx, &vocab, cfg.history_window), &vocab, estimator.as_ref(), &keywords, cfg.sal_mode)
    };
    let train_set = prep(&splits.train);
    let val_set = prep(&splits.val);
    log::info!(
        "training {} on {} instances ({} validation), vocabulary {}",
        variant.label(),
        train_set.len(),
        val_set.len(),
        vocab.len()
    );
    let outcome = train(&cfg, vocab, &train_set, &val_set, Some(&out))?;
    let manifest = RunManifest {
        data: absolute(&a.data)?,
        variant,
        estimator: estimator_path.as_deref().map(absolute).transpose()?,
        keywords: a.keywords_file.as_deref().map(absolute).transpose()?,
        seed: cfg.seed,
        splits: splits.clone(),
        train: cfg,
    };
    write_json(&out.join(SPLITS_FILE), &splits)?;
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    let best = outcome.state.best_epoch.unwrap_or(0);
    let val = outcome.state.best_val.unwrap_or(f64::NAN);
    println!("trained {}: best epoch {best}, validation L_SAL {val:.5}; wrote {}", variant.label(), out.display());
    Ok(())
}

/// `eval` output when restricted to one bucket.
#[derive(Debug, Serialize)]
struct BucketReport<'a> {
    bucket: Bucket,
    instances: usize,
    metrics: &'a hear_core::metrics::MetricSet,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics_without_audio: Option<&'a hear_core::metrics::MetricSet>,
    rows: Vec<&'a hear_core::eval::InstanceRow>,
    metadata: &'a std::collections::BTreeMap<String, serde_json::Value>,
}

fn bucket_report(report: &EvalReport, bucket: Bucket) -> BucketReport<'_> {
    let rows: Vec<_> = report.rows.iter().filter(|r| r.in_bucket(bucket)).collect();
    let without = match bucket {
        Bucket::All => report.overall_without_audio.as_ref(),
        Bucket::Audio => report.estimator_bucket_without_audio.as_ref(),
        Bucket::Keyword => None,
    };
    BucketReport { bucket, instances: rows.len(), metrics: report.bucket_metrics(bucket), metrics_without_audio: without, rows, metadata: &report.metadata }
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    let mut section = file.section("eval", EvalSection::default())?;
    if let Some(b) = a.beam {
        section.decode.beam = b;
    }
    section.decode.validate().map_err(|e| ConfigError::from_core("eval", e))?;
    let run = resolve_run_dir(&a.run);
    let loaded = load_run(&run, &a.checkpoint, a.data.as_deref())?;
    let m = &loaded.manifest;
    // The split is fixed by the training run; --seed cannot re-draw it.
    if a.common.seed.is_some_and(|s| s != m.seed) {
        log::warn!("--seed differs from the run's seed {}; splits come from the run", m.seed);
    }
    let idx = match a.split {
        SplitArg::Train => &m.splits.train,
        SplitArg::Val => &m.splits.val,
        SplitArg::Test => &m.splits.test,
    };
    if idx.iter().any(|&i| i >= loaded.dataset.dialogues.len()) {
        bail!("dataset has {} dialogues but the run's splits index beyond that", loaded.dataset.dialogues.len());
    }
    let items = loaded.dataset.items(idx, &loaded.model.vocab, m.train.history_window);
    let pairs: Vec<(&DialogueInstance, &FeatureTrack)> = items.iter().map(|(i, t)| (i, t.as_ref())).collect();
    let eval_cfg = EvalConfig { decode: section.decode, sal_mode: m.train.sal_mode, without_audio: section.without_audio };
    let mut report = evaluate(&loaded.model, loaded.estimator.as_ref(), &loaded.keywords, &pairs, &eval_cfg)?;
    report.metadata.insert("checkpoint".into(), serde_json::json!(a.checkpoint));
    report.metadata.insert("variant".into(), serde_json::to_value(m.variant)?);
    let bucket: Bucket = a.bucket.into();
    let name = format!("eval-{}-{:?}-{:?}.json", sanitize(&a.checkpoint), a.split, a.bucket).to_lowercase();
    let out = a.output.unwrap_or_else(|| run.join(name));
    let summary = if bucket == Bucket::All {
        write_json(&out, &report)?;
        serde_json::json!({
            "overall": report.overall,
            "keyword_bucket": report.keyword_bucket,
            "estimator_bucket": report.estimator_bucket,
            "instances": report.rows.len(),
        })
    } else {
        let b = bucket_report(&report, bucket);
        write_json(&out, &b)?;
        serde_json::json!({ "bucket": bucket, "instances": b.instances, "metrics": b.metrics })
    };
    print_json(&summary)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    let mut section = file.section("eval", EvalSection::default())?;
    if let Some(b) = a.beam {
        section.decode.beam = b;
    }
    let serve_cfg = file.section("serve", ServeSection::default())?;
    let run = resolve_run_dir(&a.run);
    let engine = load_run(&run, &a.checkpoint, a.data.as_deref())?.into_engine("eval", section.decode, serve_cfg.max_question_tokens)?;
    engine.clip(&a.clip)?;
    let mut session = Session::new("generate", a.clip);
    for q in &a.questions {
        let rec = engine.ask(&mut session, q)?;
        println!("{}", serde_json::to_string(&server::RoundView::from(&rec))?);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct KeywordRow {
    keyword: String,
    proportion: f64,
}

fn analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    if a.common.config.is_some() {
        ConfigFile::load(a.common.config.as_deref())?;
    }
    let ds = load_data(&a.data)?;
    let keywords = load_keywords(a.keywords_file.as_deref())?;
    let questions: Vec<Vec<String>> = ds.dialogues.iter().flat_map(|d| d.rounds.iter().map(|(q, _)| tokenize(q))).collect();
    let positive = questions.iter().filter(|q| keywords.contains_audio_keyword(q)).count();
    let rows: Vec<KeywordRow> = if a.keywords {
        keyword_proportions(&questions, &keywords).into_iter().map(|(keyword, proportion)| KeywordRow { keyword, proportion }).collect()
    } else {
        Vec::new()
    };
    if a.json {
        let mut v = serde_json::json!({
            "clips": ds.dialogues.len(),
            "questions": questions.len(),
            "keyword_positive": positive,
        });
        if a.keywords {
            v["keyword_proportions"] = serde_json::to_value(&rows)?;
        }
        return print_json(&v);
    }
    println!("clips\t{}", ds.dialogues.len());
    println!("questions\t{}", questions.len());
    println!("keyword-positive\t{positive}");
    if a.keywords {
        println!();
        println!("keyword\tproportion");
        for r in &rows {
            println!("{}\t{:.4}", r.keyword, r.proportion);
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load(a.common.config.as_deref())?;
    let mut cfg = file.section("serve", ServeSection::default())?;
    if let Some(addr) = a.addr {
        cfg.addr = addr;
    }
    if let Some(j) = a.journal {
        cfg.journal = Some(j);
    }
    let run = resolve_run_dir(&a.run);
    let engine = load_run(&run, &a.checkpoint, a.data.as_deref())?.into_engine("serve", cfg.decode.clone(), cfg.max_question_tokens)?;
    let state = Arc::new(AppState::new(engine, cfg.journal.as_deref())?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(state, &cfg.addr))
}
