//! Masked-audio reconstruction with a ranking upper bound.
//!
//! A few audio frames are zeroed and reconstructed from the encoder states
//! at their positions (`L_ar`). A second, weaker branch additionally zeroes
//! audio and video within distance `n` of every masked frame (`L_ar^n`); the
//! ranking term asks the full-context reconstruction to beat it by a margin.
//! The distance `n` shrinks over training following [`mask_distance_schedule`].

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::data::{DialogueInstance, FeatureTrack};
use crate::dlm::DlmModel;
use crate::error::{config_err, HearError, Result};

pub const DEFAULT_MARGIN: f64 = 0.05;
pub const DEFAULT_MASK_PROB: f64 = 0.1;

/// Masked frames and the surrounding distance for the upper-bound branch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    frames: usize,
    masked: Vec<usize>,
    distance: usize,
}

impl MaskPlan {
    /// `masked` is sorted and deduplicated; it must be non-empty and inside `0..frames`.
    pub fn new(frames: usize, masked: impl IntoIterator<Item = usize>, distance: usize) -> Result<Self> {
        let masked: Vec<usize> = masked.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        if masked.is_empty() {
            return Err(HearError::InvalidArgument("mask plan needs at least one masked frame".into()));
        }
        if let Some(&bad) = masked.iter().find(|&&i| i >= frames) {
            return Err(HearError::IndexOutOfRange { index: bad, len: frames });
        }
        if distance == 0 {
            return Err(HearError::InvalidArgument("surrounding distance must be at least 1".into()));
        }
        Ok(Self { frames, masked, distance })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn distance(&self) -> usize {
        self.distance
    }

    /// Frames zeroed in both streams for the upper-bound branch.
    pub fn audio_zero(&self) -> Vec<usize> {
        surrounding_zero_set(self.frames, &self.masked, self.distance)
    }

    pub fn video_zero(&self) -> Vec<usize> {
        self.audio_zero()
    }
}

/// `max(1, round(p L))` distinct frames drawn uniformly, in ascending order.
pub fn sample_mask(frames: usize, p: f64, seed: u64) -> Result<Vec<usize>> {
    sample_mask_with(frames, p, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_mask_with(frames: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if frames < 2 {
        return Err(HearError::InvalidArgument(format!("masking needs at least 2 frames, got {frames}")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(HearError::InvalidArgument(format!("mask probability {p} outside (0, 1)")));
    }
    let count = ((p * frames as f64).round() as usize).clamp(1, frames);
    let mut idx = sample(rng, frames, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Frames within distance `n` of any masked frame, masked frames included.
pub fn surrounding_zero_set(frames: usize, masked: &[usize], n: usize) -> Vec<usize> {
    let mut set = BTreeSet::new();
    for &m in masked {
        let lo = m.saturating_sub(n);
        let hi = (m + n).min(frames.saturating_sub(1));
        set.extend(lo..=hi);
    }
    set.into_iter().collect()
}

fn zero_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let mut out = x.clone();
    for &r in rows {
        out.row_mut(r).fill(0.0);
    }
    out
}

/// Audio with the masked rows replaced by zero vectors.
pub fn apply_audio_mask(audio: &Tensor, masked: &[usize]) -> Result<Tensor> {
    if let Some(&bad) = masked.iter().find(|&&i| i >= audio.nrows()) {
        return Err(HearError::IndexOutOfRange { index: bad, len: audio.nrows() });
    }
    Ok(zero_rows(audio, masked))
}

/// Audio and video with every frame within distance `n` of a masked frame zeroed.
pub fn apply_surrounding_mask(track: &FeatureTrack, masked: &[usize], n: usize) -> Result<(Tensor, Tensor)> {
    let plan = MaskPlan::new(track.frames(), masked.iter().copied(), n)?;
    let zero = plan.audio_zero();
    Ok((zero_rows(&track.audio, &zero), zero_rows(&track.video, &zero)))
}

fn masked_targets(track: &FeatureTrack, masked: &[usize]) -> Tensor {
    let mut t = Array2::zeros((masked.len(), track.audio_dim()));
    for (row, &m) in masked.iter().enumerate() {
        t.row_mut(row).assign(&track.audio.row(m));
    }
    t
}

fn recon_branch(
    model: &DlmModel,
    g: &mut Graph,
    instance: &DialogueInstance,
    track: &FeatureTrack,
    masked: &[usize],
    audio: Tensor,
    video: Tensor,
) -> Result<Var> {
    let fused = model.fuse_raw(g, audio, video)?;
    let memory = model.encode(g, fused, instance)?;
    let recon = model.reconstruct(g, memory, track.frames(), masked)?;
    Ok(g.sq_err_sum(recon, masked_targets(track, masked)))
}

/// `sum_i ||u_i - u~_i||^2` over masked frames, reconstructing from
/// `[u_{\m} || v]`.
pub fn audio_recon_graph(
    model: &DlmModel,
    g: &mut Graph,
    instance: &DialogueInstance,
    track: &FeatureTrack,
    masked: &[usize],
) -> Result<Var> {
    let audio = apply_audio_mask(&track.audio, masked)?;
    recon_branch(model, g, instance, track, masked, audio, track.video.clone())
}

/// The same reconstruction error with surroundings up to `n` removed from both streams.
pub fn upper_bound_graph(
    model: &DlmModel,
    g: &mut Graph,
    instance: &DialogueInstance,
    track: &FeatureTrack,
    masked: &[usize],
    n: usize,
) -> Result<Var> {
    let (audio, video) = apply_surrounding_mask(track, masked, n)?;
    recon_branch(model, g, instance, track, masked, audio, video)
}

pub fn audio_recon_loss(model: &DlmModel, instance: &DialogueInstance, track: &FeatureTrack, masked: &[usize]) -> Result<f64> {
    let mut g = Graph::new(model.params.tensors());
    let l = audio_recon_graph(model, &mut g, instance, track, masked)?;
    Ok(g.scalar(l))
}

pub fn upper_bound_loss(
    model: &DlmModel,
    instance: &DialogueInstance,
    track: &FeatureTrack,
    masked: &[usize],
    n: usize,
) -> Result<f64> {
    let mut g = Graph::new(model.params.tensors());
    let l = upper_bound_graph(model, &mut g, instance, track, masked, n)?;
    Ok(g.scalar(l))
}

/// `max(L_ar - L_ar^n + delta, 0)`
pub fn rub_loss(l_ar: f64, l_ar_n: f64, delta: f64) -> f64 {
    (l_ar - l_ar_n + delta).max(0.0)
}

/// Which RLE terms are active and how the bound branch is treated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RleConfig {
    pub reconstruction: bool,
    pub ranking: bool,
    pub margin: f64,
    pub mask_prob: f64,
    /// Backpropagate through the upper-bound branch as well.
    pub bound_gradients: bool,
}

impl Default for RleConfig {
    fn default() -> Self {
        Self { reconstruction: true, ranking: true, margin: DEFAULT_MARGIN, mask_prob: DEFAULT_MASK_PROB, bound_gradients: false }
    }
}

impl RleConfig {
    pub fn enabled(&self) -> bool {
        self.reconstruction || self.ranking
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(config_err("rle.margin", "must be positive"));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(config_err("rle.mask_prob", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Component values of one RLE evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RleParts {
    pub l_ar: f64,
    pub l_ar_n: f64,
    pub l_rub: f64,
}

/// `L_ar + L_rub` (or whichever terms are enabled) as a graph node.
pub fn rle_graph(
    model: &DlmModel,
    g: &mut Graph,
    instance: &DialogueInstance,
    track: &FeatureTrack,
    masked: &[usize],
    n: usize,
    cfg: &RleConfig,
) -> Result<(Var, RleParts)> {
    let l_ar = audio_recon_graph(model, g, instance, track, masked)?;
    let ar_value = g.scalar(l_ar);
    let bound = if cfg.bound_gradients {
        upper_bound_graph(model, g, instance, track, masked, n)?
    } else {
        let v = upper_bound_loss(model, instance, track, masked, n)?;
        g.constant(Tensor::from_elem((1, 1), v))
    };
    let bound_value = g.scalar(bound);
    let gap = g.sub(l_ar, bound);
    let shifted = g.add_scalar(gap, cfg.margin);
    let l_rub = g.relu(shifted);
    let parts = RleParts { l_ar: ar_value, l_ar_n: bound_value, l_rub: g.scalar(l_rub) };
    let loss = match (cfg.reconstruction, cfg.ranking) {
        (true, true) => g.add(l_ar, l_rub),
        (true, false) => l_ar,
        (false, true) => l_rub,
        (false, false) => return Err(HearError::InvalidArgument("no RLE term enabled".into())),
    };
    Ok((loss, parts))
}

pub fn rle_loss(
    model: &DlmModel,
    instance: &DialogueInstance,
    track: &FeatureTrack,
    masked: &[usize],
    n: usize,
    cfg: &RleConfig,
) -> Result<(f64, RleParts)> {
    let mut g = Graph::new(model.params.tensors());
    let (l, parts) = rle_graph(model, &mut g, instance, track, masked, n, cfg)?;
    Ok((g.scalar(l), parts))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleCurve {
    #[default]
    Hyperbolic,
    Linear,
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub curve: ScheduleCurve,
    pub n_max: usize,
    pub e_max: usize,
    /// Steepness of the logistic curve.
    pub steepness: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { curve: ScheduleCurve::Hyperbolic, n_max: 5, e_max: 15, steepness: 1.0 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max < 1 {
            return Err(config_err("schedule.n_max", "must be at least 1"));
        }
        if self.e_max < 2 {
            return Err(config_err("schedule.e_max", "must be at least 2"));
        }
        if !(self.steepness > 0.0 && self.steepness.is_finite()) {
            return Err(config_err("schedule.steepness", "must be positive"));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        (self.n_max as f64 - 1.0) / ((self.e_max as f64) - 1.0).sqrt()
    }
}

/// Surrounding distance `n` for epoch `e` (1-based), non-increasing from
/// `n_max` at `e = 1` to 1 at `e = e_max`.
pub fn mask_distance_schedule(e: usize, cfg: &ScheduleConfig) -> Result<usize> {
    cfg.validate()?;
    if e < 1 || e > cfg.e_max {
        return Err(HearError::InvalidArgument(format!("epoch {e} outside 1..={}", cfg.e_max)));
    }
    let (ef, emax, span) = (e as f64, cfg.e_max as f64, cfg.n_max as f64 - 1.0);
    let n = match cfg.curve {
        ScheduleCurve::Hyperbolic => (cfg.alpha() * (emax - ef).sqrt()).round() + 1.0,
        ScheduleCurve::Linear => (cfg.n_max as f64 - span * (ef - 1.0) / (emax - 1.0)).round(),
        ScheduleCurve::Logistic => {
            // Rescaled so the curve hits both end points exactly.
            let s = |x: f64| 1.0 / (1.0 + (cfg.steepness * (x - emax / 2.0)).exp());
            let t = (s(ef) - s(emax)) / (s(1.0) - s(emax));
            (1.0 + span * t).round()
        }
    };
    Ok((n as usize).clamp(1, cfg.n_max))
}

/// One row of the per-epoch schedule trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTraceRow {
    pub epoch: usize,
    pub n: usize,
    /// Means over the epoch's reconstruction steps; absent when none ran.
    pub mean_l_ar: Option<f64>,
    pub mean_l_ar_n: Option<f64>,
    pub mean_l_rub: Option<f64>,
}
