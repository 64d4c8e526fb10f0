//! End-to-end runs on the synthetic corpus: clip-level splits, estimator
//! training on corpus questions, and per-variant training plus evaluation.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::synth::{synth_corpus, QuestionLabel, SynthCorpus, SynthCorpusConfig};
use crate::data::{DialogueInstance, FeatureTrack};
use crate::error::{HearError, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::sal::{
    build_estimator_labels, train_estimator, EstimatorConfig, EstimatorModel, EstimatorReport, KeywordSet,
    LabelConfig, LabeledQuestion,
};
use crate::dlm::DlmConfig;
use crate::optim::LrSchedule;
use crate::trainer::{prepare_examples, train, TrainConfig, TrainOutcome, Variant};

/// Fraction of clips held out for validation and for test.
pub const DESK_SPLIT: (f64, f64) = (0.2, 0.2);

/// Training setup sized for a laptop run on the synthetic corpus.
///
/// Rates near 1e-4 are far too small for a few hundred steps from scratch,
/// so this uses 3e-3 decaying to 3e-5. Reconstruction steps keep their own
/// optimizer moments and a tenth of the learning rate; with shared moments
/// or the full rate they pull the encoder away from the answer task.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        model: DlmConfig {
            width: 64,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_hidden: 128,
            recon_hidden: 64,
            max_len: 160,
            video_dim: 32,
            audio_dim: 8,
            seed,
        },
        epochs: 15,
        batch_size: 8,
        lr: LrSchedule { start: 3e-3, end: 3e-5, breakpoints: Vec::new() },
        seed,
        separate_moments: true,
        rle_lr_scale: 0.1,
        ..TrainConfig::default()
    };
    cfg.rle.mask_prob = 0.25;
    cfg
}

/// Everything one seed of an ablation produces.
pub struct Ablation {
    pub corpus: SynthCorpus,
    pub splits: Splits,
    pub estimator: EstimatorModel,
    pub estimator_report: EstimatorReport,
    pub runs: Vec<VariantRun>,
}

/// Builds the corpus for `seed`, trains the estimator on the training clips
/// and then every requested variant.
pub fn run_ablation(
    corpus_cfg: &SynthCorpusConfig,
    base: &TrainConfig,
    variants: &[Variant],
    eval: &EvalConfig,
    out_dir: Option<&Path>,
) -> Result<Ablation> {
    let seed = base.seed;
    let corpus = synth_corpus(&SynthCorpusConfig { seed, ..corpus_cfg.clone() })?;
    let splits = split_clips(corpus.clips.len(), DESK_SPLIT.0, DESK_SPLIT.1, seed)?;
    let keywords = KeywordSet::default();
    let (estimator, estimator_report, _) = corpus_estimator(
        &corpus,
        &splits.train,
        &keywords,
        &LabelConfig { seed, ..LabelConfig::default() },
        &EstimatorConfig { seed, ..EstimatorConfig::default() },
    )?;
    let runs = variants
        .iter()
        .map(|&v| {
            let dir = out_dir.map(|d| d.join(v.label()));
            run_variant(&corpus, &splits, Some(&estimator), &keywords, base, v, eval, dir.as_deref())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ablation { corpus, splits, estimator, estimator_report, runs })
}

/// Clip indices per split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded clip-level split; every split gets at least one clip when there
/// are three or more.
pub fn split_clips(clips: usize, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Splits> {
    if clips < 3 {
        return Err(HearError::InvalidArgument("need at least 3 clips to split".into()));
    }
    let mut idx: Vec<usize> = (0..clips).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5B17));
    let n_val = ((clips as f64 * val_fraction).round() as usize).max(1);
    let n_test = ((clips as f64 * test_fraction).round() as usize).max(1);
    if n_val + n_test >= clips {
        return Err(HearError::InvalidArgument("split fractions leave no training clips".into()));
    }
    let test = idx[..n_test].to_vec();
    let val = idx[n_test..n_test + n_val].to_vec();
    let train = idx[n_test + n_val..].to_vec();
    Ok(Splits { train, val, test })
}

/// Instances with shared tracks and ground-truth labels for a set of clips.
pub fn corpus_items(corpus: &SynthCorpus, clips: &[usize]) -> Vec<(DialogueInstance, Arc<FeatureTrack>, QuestionLabel)> {
    clips
        .iter()
        .flat_map(|&c| {
            let clip = &corpus.clips[c];
            let track = Arc::new(clip.track.clone());
            clip.instances.iter().zip(&clip.labels).map(move |(i, l)| (i.clone(), Arc::clone(&track), *l))
        })
        .collect()
}

/// Noisy labels from every question in `clips`, then estimator training.
pub fn corpus_estimator(
    corpus: &SynthCorpus,
    clips: &[usize],
    keywords: &KeywordSet,
    labels: &LabelConfig,
    cfg: &EstimatorConfig,
) -> Result<(EstimatorModel, EstimatorReport, Vec<LabeledQuestion>)> {
    let questions: Vec<Vec<String>> = clips
        .iter()
        .flat_map(|&c| corpus.clips[c].instances.iter().map(|i| corpus.vocab.tokens_of(&i.question).into_iter().map(String::from).collect()))
        .collect();
    let set = build_estimator_labels(&questions, keywords, labels)?;
    let (model, report) = train_estimator(&set, keywords, cfg)?;
    Ok((model, report, set))
}

pub struct VariantRun {
    pub variant: Variant,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
    /// Ground truth for each report row, in row order.
    pub labels: Vec<QuestionLabel>,
}

impl VariantRun {
    /// Exact-match accuracy over rows whose label satisfies `keep`.
    pub fn accuracy_where(&self, keep: impl Fn(&QuestionLabel) -> bool) -> Option<f64> {
        let hits: Vec<bool> =
            self.report.rows.iter().zip(&self.labels).filter(|(_, l)| keep(l)).map(|(r, _)| r.exact_match).collect();
        (!hits.is_empty()).then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    }
}

/// Trains `variant` on the train split, selects on validation, and evaluates
/// the selected model on the test split.
#[allow(clippy::too_many_arguments)]
pub fn run_variant(
    corpus: &SynthCorpus,
    splits: &Splits,
    estimator: Option<&EstimatorModel>,
    keywords: &KeywordSet,
    base: &TrainConfig,
    variant: Variant,
    eval: &EvalConfig,
    out_dir: Option<&Path>,
) -> Result<VariantRun> {
    let cfg = variant.apply(base);
    let prep = |clips: &[usize]| {
        let items = corpus_items(corpus, clips).into_iter().map(|(i, t, _)| (i, t));
        prepare_examples(items, &corpus.vocab, estimator, keywords, cfg.sal_mode)
    };
    let train_set = prep(&splits.train);
    let val_set = prep(&splits.val);
    let outcome = train(&cfg, corpus.vocab.clone(), &train_set, &val_set, out_dir)?;
    let test_items = corpus_items(corpus, &splits.test);
    let pairs: Vec<(&DialogueInstance, &FeatureTrack)> = test_items.iter().map(|(i, t, _)| (i, t.as_ref())).collect();
    let eval_cfg = EvalConfig { sal_mode: cfg.sal_mode, ..eval.clone() };
    let report = evaluate(&outcome.best, estimator, keywords, &pairs, &eval_cfg)?;
    let labels = test_items.iter().map(|(_, _, l)| *l).collect();
    Ok(VariantRun { variant, outcome, report, labels })
}
