//! The alternating training loop.
//!
//! Odd iterations step on the answer loss over question-conditioned fusion,
//! even iterations on the reconstruction losses. Disabling reconstruction
//! collapses every iteration to the answer loss.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{DialogueInstance, FeatureTrack, Vocabulary, DEFAULT_HISTORY_WINDOW};
use crate::dlm::{DlmConfig, DlmModel, Fusion};
use crate::error::{config_err, HearError, Result};
use crate::eval::relatedness;
use crate::optim::{mean_gradients, mean_gradients_aux, AdamW, AdamWConfig, LrSchedule};
use crate::rle::{mask_distance_schedule, rle_graph, sample_mask, RleConfig, RleParts, ScheduleConfig, ScheduleTraceRow};
use crate::sal::{EstimatorModel, KeywordSet, SalMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: DlmConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub optimizer: AdamWConfig,
    pub sal_mode: SalMode,
    pub rle: RleConfig,
    pub schedule: ScheduleConfig,
    pub history_window: usize,
    pub seed: u64,
    /// Keep separate optimizer moments for the answer and reconstruction
    /// losses instead of sharing one set.
    pub separate_moments: bool,
    /// Multiplier on the learning rate for reconstruction steps.
    pub rle_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: DlmConfig::default(),
            epochs: 15,
            batch_size: 8,
            lr: LrSchedule::default(),
            optimizer: AdamWConfig::default(),
            sal_mode: SalMode::Estimator,
            rle: RleConfig::default(),
            schedule: ScheduleConfig::default(),
            history_window: DEFAULT_HISTORY_WINDOW,
            seed: 0,
            separate_moments: false,
            rle_lr_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lr.validate()?;
        self.schedule.validate()?;
        if self.rle.enabled() {
            self.rle.validate()?;
        }
        if self.epochs == 0 {
            return Err(config_err("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be at least 1"));
        }
        if !(self.rle_lr_scale > 0.0 && self.rle_lr_scale.is_finite()) {
            return Err(config_err("rle_lr_scale", "must be positive"));
        }
        Ok(())
    }

    /// Surrounding distance used during `epoch` (1-based). Epochs past the
    /// schedule horizon keep its final value.
    pub fn distance_at(&self, epoch: usize) -> Result<usize> {
        mask_distance_schedule(epoch.clamp(1, self.schedule.e_max), &self.schedule)
    }
}

/// The six ablation rows: fusion rule and reconstruction terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Keyword,
    Estimator,
    EstimatorReconstruction,
    EstimatorRanking,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Keyword,
        Variant::Estimator,
        Variant::EstimatorReconstruction,
        Variant::EstimatorRanking,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "none",
            Variant::Keyword => "k",
            Variant::Estimator => "s",
            Variant::EstimatorReconstruction => "s+L_ar",
            Variant::EstimatorRanking => "s+L_rub",
            Variant::Full => "s+L_ar+L_rub",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let (mode, ar, rub) = match self {
            Variant::Baseline => (SalMode::None, false, false),
            Variant::Keyword => (SalMode::Keyword, false, false),
            Variant::Estimator => (SalMode::Estimator, false, false),
            Variant::EstimatorReconstruction => (SalMode::Estimator, true, false),
            Variant::EstimatorRanking => (SalMode::Estimator, false, true),
            Variant::Full => (SalMode::Estimator, true, true),
        };
        let mut out = cfg.clone();
        out.sal_mode = mode;
        out.rle.reconstruction = ar;
        out.rle.ranking = rub;
        out
    }
}

/// One training instance with its fusion decided up front.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub instance: DialogueInstance,
    pub track: Arc<FeatureTrack>,
    pub fusion: Fusion,
}

/// Attaches the fusion each instance gets under `mode`.
pub fn prepare_examples(
    items: impl IntoIterator<Item = (DialogueInstance, Arc<FeatureTrack>)>,
    vocab: &Vocabulary,
    estimator: Option<&EstimatorModel>,
    keywords: &KeywordSet,
    mode: SalMode,
) -> Vec<TrainExample> {
    items
        .into_iter()
        .map(|(instance, track)| {
            let q = vocab.tokens_of(&instance.question);
            let fusion = relatedness(estimator, keywords, mode, &q).fusion();
            TrainExample { instance, track, fusion }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Sal,
    Rle,
}

/// Which loss iteration `iteration` (1-based) optimises.
pub fn step_kind(iteration: u64, rle_enabled: bool) -> StepKind {
    if rle_enabled && iteration.is_multiple_of(2) {
        StepKind::Rle
    } else {
        StepKind::Sal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub kind: StepKind,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Batch means of the reconstruction components.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parts: Option<RleParts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub n: usize,
    pub train_sal: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_rle: Option<f64>,
    pub val_sal: f64,
    pub lr: f64,
}

/// Counters and optimizer moments; with the model this fully determines
/// subsequent training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer: AdamW,
    /// Moments for reconstruction steps when they are kept separate.
    #[serde(default)]
    pub rle_optimizer: Option<AdamW>,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a combined word.
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: DlmModel,
    pub state: TrainState,
    total_steps: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: Vocabulary, train_len: usize) -> Result<Self> {
        cfg.validate()?;
        let model = DlmModel::new(cfg.model.clone(), vocab)?;
        let optimizer = AdamW::new(cfg.optimizer.clone(), &model.params);
        let rle_optimizer = cfg.separate_moments.then(|| AdamW::new(cfg.optimizer.clone(), &model.params));
        let state = TrainState { iteration: 0, epoch: 0, optimizer, rle_optimizer, best_val: None, best_epoch: None };
        Self::resume(cfg, model, state, train_len)
    }

    pub fn resume(cfg: TrainConfig, model: DlmModel, state: TrainState, train_len: usize) -> Result<Self> {
        cfg.validate()?;
        if train_len == 0 {
            return Err(HearError::InvalidArgument("training split is empty".into()));
        }
        let per_batch = if cfg.rle.enabled() { 2 } else { 1 };
        let total_steps = (cfg.epochs * train_len.div_ceil(cfg.batch_size) * per_batch) as u64;
        Ok(Self { cfg, model, state, total_steps })
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Batch order for `epoch`, a function of the seed and epoch only.
    pub fn batch_order(&self, epoch: usize, len: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, epoch as u64)));
        idx
    }

    /// One optimisation step on the loss selected by iteration parity.
    pub fn hear_step(&mut self, batch: &[&TrainExample], epoch: usize) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(HearError::InvalidArgument("empty batch".into()));
        }
        let iteration = self.state.iteration + 1;
        let kind = step_kind(iteration, self.cfg.rle.enabled());
        let lr = self.cfg.lr.lr_at(iteration - 1, self.total_steps);
        let model = &self.model;
        let (loss, grads, n, parts) = match kind {
            StepKind::Sal => {
                let (loss, grads) = mean_gradients(&model.params, batch, |g, ex| {
                    let fused = model.fuse(g, &ex.track, ex.fusion)?;
                    model.answer_loss(g, fused, &ex.instance)
                })?;
                (loss, grads, None, None)
            }
            StepKind::Rle => {
                let n = self.cfg.distance_at(epoch)?;
                let masks: Vec<Vec<usize>> = batch
                    .iter()
                    .enumerate()
                    .map(|(i, ex)| {
                        sample_mask(ex.track.frames(), self.cfg.rle.mask_prob, mix(mix(self.cfg.seed, iteration), i as u64))
                    })
                    .collect::<Result<_>>()?;
                let items: Vec<(&TrainExample, &Vec<usize>)> = batch.iter().copied().zip(&masks).collect();
                let (loss, grads, parts) = mean_gradients_aux(&model.params, &items, |g, (ex, m)| {
                    rle_graph(model, g, &ex.instance, &ex.track, m, n, &self.cfg.rle)
                })?;
                let k = parts.len() as f64;
                let mean = RleParts {
                    l_ar: parts.iter().map(|p| p.l_ar).sum::<f64>() / k,
                    l_ar_n: parts.iter().map(|p| p.l_ar_n).sum::<f64>() / k,
                    l_rub: parts.iter().map(|p| p.l_rub).sum::<f64>() / k,
                };
                (loss, grads, Some(n), Some(mean))
            }
        };
        if !loss.is_finite() {
            let clips: Vec<&str> = batch.iter().map(|e| e.instance.clip_id.as_str()).collect();
            log::error!("non-finite {kind:?} loss {loss} at iteration {iteration}, epoch {epoch}, clips {clips:?}");
            return Err(HearError::NonFiniteLoss { iteration, loss });
        }
        let opt = match (kind, self.state.rle_optimizer.as_mut()) {
            (StepKind::Rle, Some(o)) => o,
            _ => &mut self.state.optimizer,
        };
        let lr = if kind == StepKind::Rle { lr * self.cfg.rle_lr_scale } else { lr };
        opt.update(&mut self.model.params, &grads, lr);
        self.state.iteration = iteration;
        Ok(StepRecord { iteration, epoch, kind, loss, lr, n, parts })
    }

    /// Runs the next epoch over `train` and returns its step records. With
    /// reconstruction enabled each batch is used twice: an odd iteration on
    /// the answer loss, then an even one on the reconstruction loss.
    pub fn run_epoch(&mut self, train: &[TrainExample]) -> Result<Vec<StepRecord>> {
        let epoch = self.state.epoch + 1;
        let order = self.batch_order(epoch, train.len());
        let per_batch = if self.cfg.rle.enabled() { 2 } else { 1 };
        let mut records = Vec::with_capacity(order.len().div_ceil(self.cfg.batch_size) * per_batch);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &train[i]).collect();
            for _ in 0..per_batch {
                records.push(self.hear_step(&batch, epoch)?);
            }
        }
        self.state.epoch = epoch;
        Ok(records)
    }

    /// Mean answer loss over `examples` with their configured fusion.
    pub fn validation_loss(&self, examples: &[TrainExample]) -> Result<f64> {
        validation_loss(&self.model, examples)
    }
}

pub fn validation_loss(model: &DlmModel, examples: &[TrainExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(HearError::InvalidArgument("validation split is empty".into()));
    }
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new(model.params.tensors());
            let fused = model.fuse(&mut g, &ex.track, ex.fusion)?;
            let l = model.answer_loss(&mut g, fused, &ex.instance)?;
            Ok(g.scalar(l))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: DlmModel,
    pub last: DlmModel,
    pub state: TrainState,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub trace: Vec<ScheduleTraceRow>,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Full run: `cfg.epochs` epochs, validation after each, best-checkpoint
/// selection. With `out_dir`, writes `best.json`, `last.json`, `state.json`,
/// `metrics.jsonl`, `steps.jsonl` and `trace.jsonl`.
pub fn train(
    cfg: &TrainConfig,
    vocab: Vocabulary,
    train_set: &[TrainExample],
    val_set: &[TrainExample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if val_set.is_empty() {
        return Err(HearError::InvalidArgument("validation split is empty".into()));
    }
    let mut trainer = Trainer::new(cfg.clone(), vocab, train_set.len())?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut best = trainer.model.clone();
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut trace = Vec::new();
    for _ in 0..cfg.epochs {
        let records = match trainer.run_epoch(train_set) {
            Ok(r) => r,
            Err(e) => {
                if let (Some(dir), HearError::NonFiniteLoss { iteration, loss }) = (out_dir, &e) {
                    let extra = serde_json::json!({"diagnostic": "non-finite loss", "iteration": iteration, "loss": loss.to_string()});
                    trainer.model.save(&dir.join("diagnostic.json"), extra)?;
                }
                return Err(e);
            }
        };
        let epoch = trainer.state.epoch;
        let val = trainer.validation_loss(val_set)?;
        if !val.is_finite() {
            return Err(HearError::NonFiniteLoss { iteration: trainer.state.iteration, loss: val });
        }
        let n = cfg.distance_at(epoch)?;
        let rle: Vec<&RleParts> = records.iter().filter_map(|r| r.parts.as_ref()).collect();
        trace.push(ScheduleTraceRow {
            epoch,
            n,
            mean_l_ar: mean_of(rle.iter().map(|p| p.l_ar)),
            mean_l_ar_n: mean_of(rle.iter().map(|p| p.l_ar_n)),
            mean_l_rub: mean_of(rle.iter().map(|p| p.l_rub)),
        });
        epochs.push(EpochRecord {
            epoch,
            n,
            train_sal: mean_of(records.iter().filter(|r| r.kind == StepKind::Sal).map(|r| r.loss)).unwrap_or(f64::NAN),
            train_rle: mean_of(records.iter().filter(|r| r.kind == StepKind::Rle).map(|r| r.loss)),
            val_sal: val,
            lr: records.last().map_or(0.0, |r| r.lr),
        });
        log::info!("epoch {epoch}: val L_SAL {val:.5} (n = {n})");
        if trainer.state.best_val.is_none_or(|b| val < b) {
            trainer.state.best_val = Some(val);
            trainer.state.best_epoch = Some(epoch);
            best = trainer.model.clone();
        }
        steps.extend(records);
    }
    if let Some(dir) = out_dir {
        let meta = serde_json::json!({
            "best_epoch": trainer.state.best_epoch,
            "best_val_sal": trainer.state.best_val,
            "train_config": cfg,
        });
        best.save(&dir.join("best.json"), meta.clone())?;
        trainer.model.save(&dir.join("last.json"), meta)?;
        fs::write(dir.join("state.json"), serde_json::to_vec(&trainer.state)?)?;
        write_jsonl(&dir.join("metrics.jsonl"), &epochs)?;
        write_jsonl(&dir.join("steps.jsonl"), &steps)?;
        write_jsonl(&dir.join("trace.jsonl"), &trace)?;
    }
    Ok(TrainOutcome { best, last: trainer.model, state: trainer.state, epochs, steps, trace })
}
