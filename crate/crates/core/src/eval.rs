//! Decoding a test set and scoring it overall and on audio-question buckets.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::{DialogueInstance, FeatureTrack, Vocabulary};
use crate::decode::{beam_decode, DecodeConfig};
use crate::dlm::DlmModel;
use crate::error::{HearError, Result};
use crate::metrics::{score_corpus, MetricSet};
use crate::sal::{decide, EstimatorModel, KeywordSet, RelatednessDecision, SalMode, AUDIO_BUCKET_THRESHOLD};

/// Which bucket a report (or the CLI) should restrict itself to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    #[default]
    All,
    /// Keyword hit.
    Keyword,
    /// Estimator score above the bucket threshold.
    Audio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    pub sal_mode: SalMode,
    /// Also decode every instance with the audio stream zeroed.
    pub without_audio: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { decode: DecodeConfig::default(), sal_mode: SalMode::Estimator, without_audio: false }
    }
}

/// One scored instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub index: usize,
    pub clip_id: String,
    pub round: usize,
    pub question: String,
    pub reference: String,
    pub candidate: String,
    pub decision: RelatednessDecision,
    pub exact_match: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate_without_audio: Option<String>,
}

impl InstanceRow {
    pub fn in_bucket(&self, bucket: Bucket) -> bool {
        match bucket {
            Bucket::All => true,
            Bucket::Keyword => self.decision.keyword_hit,
            Bucket::Audio => self.decision.score > AUDIO_BUCKET_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: MetricSet,
    pub keyword_bucket: MetricSet,
    pub estimator_bucket: MetricSet,
    /// Metrics of the audio-zeroed decode, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overall_without_audio: Option<MetricSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimator_bucket_without_audio: Option<MetricSet>,
    pub rows: Vec<InstanceRow>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    pub fn bucket_metrics(&self, bucket: Bucket) -> &MetricSet {
        match bucket {
            Bucket::All => &self.overall,
            Bucket::Keyword => &self.keyword_bucket,
            Bucket::Audio => &self.estimator_bucket,
        }
    }

    /// Metrics over an arbitrary subset of rows.
    pub fn metrics_where(&self, keep: impl Fn(&InstanceRow) -> bool) -> MetricSet {
        score_rows(self.rows.iter().filter(|r| keep(r)), |r| &r.candidate)
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn score_rows<'a>(rows: impl Iterator<Item = &'a InstanceRow>, cand: impl Fn(&InstanceRow) -> &String) -> MetricSet {
    let (c, r): (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) =
        rows.map(|row| (words(cand(row)), vec![words(&row.reference)])).unzip();
    score_corpus(&c, &r)
}

/// The estimator score and fusion used for a question.
pub fn relatedness(
    estimator: Option<&EstimatorModel>,
    keywords: &KeywordSet,
    mode: SalMode,
    question: &[&str],
) -> RelatednessDecision {
    // Without an estimator the keyword verdict stands in for the score.
    let hit = keywords.contains_audio_keyword(question);
    let score = estimator.map_or(if hit { 1.0 } else { 0.0 }, |e| e.score(question));
    decide(mode, hit, score)
}

fn silence_audio(track: &FeatureTrack) -> Result<FeatureTrack> {
    FeatureTrack::new(track.video.clone(), Tensor::zeros(track.audio.raw_dim()))
}

/// Decodes every `(instance, track)` pair and builds the report.
pub fn evaluate(
    model: &DlmModel,
    estimator: Option<&EstimatorModel>,
    keywords: &KeywordSet,
    items: &[(&DialogueInstance, &FeatureTrack)],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(HearError::InvalidArgument("evaluation corpus is empty".into()));
    }
    cfg.decode.validate()?;
    let vocab: &Vocabulary = &model.vocab;
    let rows: Vec<InstanceRow> = items
        .par_iter()
        .enumerate()
        .map(|(index, (inst, track))| {
            let q_tokens = vocab.tokens_of(&inst.question);
            let decision = relatedness(estimator, keywords, cfg.sal_mode, &q_tokens);
            let fused = model.fused_value(track, decision.fusion())?;
            let answer = beam_decode(model, &fused, inst, &cfg.decode)?;
            let candidate = vocab.decode(&answer);
            let reference = vocab.decode(&inst.answer);
            let candidate_without_audio = if cfg.without_audio {
                let fused = model.fused_value(&silence_audio(track)?, decision.fusion())?;
                Some(vocab.decode(&beam_decode(model, &fused, inst, &cfg.decode)?))
            } else {
                None
            };
            Ok(InstanceRow {
                index,
                clip_id: inst.clip_id.clone(),
                round: inst.round,
                question: vocab.decode(&inst.question),
                exact_match: candidate == reference,
                reference,
                candidate,
                decision,
                candidate_without_audio,
            })
        })
        .collect::<Result<_>>()?;

    let all = |b: Bucket| score_rows(rows.iter().filter(|r| r.in_bucket(b)), |r| &r.candidate);
    let without = |b: Bucket| {
        cfg.without_audio.then(|| {
            score_rows(rows.iter().filter(|r| r.in_bucket(b)), |r| r.candidate_without_audio.as_ref().expect("decoded"))
        })
    };
    let mut metadata = BTreeMap::new();
    metadata.insert("instances".into(), serde_json::json!(rows.len()));
    metadata.insert("sal_mode".into(), serde_json::to_value(cfg.sal_mode)?);
    metadata.insert("decode".into(), serde_json::to_value(&cfg.decode)?);
    metadata.insert("estimator".into(), serde_json::json!(estimator.is_some()));
    if rows.len() == 1 {
        metadata.insert("note".into(), serde_json::json!("single-instance corpus: CIDEr-D document frequencies are degenerate"));
    }
    Ok(EvalReport {
        overall: all(Bucket::All),
        keyword_bucket: all(Bucket::Keyword),
        estimator_bucket: all(Bucket::Audio),
        overall_without_audio: without(Bucket::All),
        estimator_bucket_without_audio: without(Bucket::Audio),
        rows,
        metadata,
    })
}

/// Share of keyword-positive questions containing each base keyword. A
/// question with several keywords counts toward each of them.
pub fn keyword_proportions<S: AsRef<str>>(questions: &[Vec<S>], keywords: &KeywordSet) -> Vec<(String, f64)> {
    let hits: Vec<Vec<&str>> =
        questions.iter().map(|q| keywords.hits(q)).filter(|h| !h.is_empty()).collect();
    let total = hits.len();
    keywords
        .base()
        .iter()
        .map(|k| {
            let n = hits.iter().filter(|h| h.contains(&k.as_str())).count();
            (k.clone(), if total == 0 { 0.0 } else { n as f64 / total as f64 })
        })
        .collect()
}
