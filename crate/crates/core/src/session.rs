//! Interactive multi-round dialogue over a frozen model.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{tokenize, TokenId, DialogueInstance, FeatureTrack, QaPair, DEFAULT_HISTORY_WINDOW};
use crate::decode::{beam_decode, DecodeConfig};
use crate::dlm::DlmModel;
use crate::error::{HearError, Result};
use crate::eval::relatedness;
use crate::sal::{EstimatorModel, KeywordSet, RelatednessDecision, SalMode};

/// A clip the engine can talk about.
#[derive(Clone, Debug)]
pub struct Clip {
    pub caption: String,
    pub track: FeatureTrack,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub question: String,
    pub answer: String,
    pub decision: RelatednessDecision,
    pub decode_ms: f64,
    pub question_ids: Vec<TokenId>,
    pub answer_ids: Vec<TokenId>,
}

/// One user conversation about one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub clip_id: String,
    pub rounds: Vec<RoundRecord>,
}

impl Session {
    pub fn new(id: impl Into<String>, clip_id: impl Into<String>) -> Self {
        Self { id: id.into(), clip_id: clip_id.into(), rounds: Vec::new() }
    }

    /// The context pairs the next question will see.
    pub fn history(&self, window: usize) -> &[RoundRecord] {
        &self.rounds[self.rounds.len().saturating_sub(window)..]
    }
}

/// Frozen model, estimator and clip catalogue shared by all sessions.
pub struct DialogueEngine {
    pub model: DlmModel,
    pub estimator: Option<EstimatorModel>,
    pub keywords: KeywordSet,
    pub sal_mode: SalMode,
    pub decode: DecodeConfig,
    pub history_window: usize,
    pub max_question_tokens: usize,
    pub clips: BTreeMap<String, Clip>,
}

impl DialogueEngine {
    pub fn new(model: DlmModel, estimator: Option<EstimatorModel>, clips: BTreeMap<String, Clip>) -> Self {
        Self {
            model,
            estimator,
            keywords: KeywordSet::default(),
            sal_mode: SalMode::Estimator,
            decode: DecodeConfig::default(),
            history_window: DEFAULT_HISTORY_WINDOW,
            max_question_tokens: 64,
            clips,
        }
    }

    /// The instance the model answers for `question` given the session so far.
    pub fn instance_for(&self, session: &Session, question: &str) -> Result<DialogueInstance> {
        let clip = self.clip(&session.clip_id)?;
        let vocab = &self.model.vocab;
        let previous: Vec<QaPair> = session.rounds.iter().map(|r| (r.question_ids.clone(), r.answer_ids.clone())).collect();
        Ok(DialogueInstance::from_rounds(
            session.clip_id.clone(),
            vocab.encode(&clip.caption),
            &previous,
            vocab.encode(question),
            Vec::new(),
            self.history_window,
        ))
    }

    pub fn clip(&self, clip_id: &str) -> Result<&Clip> {
        self.clips.get(clip_id).ok_or_else(|| HearError::InvalidArgument(format!("unknown clip {clip_id}")))
    }

    /// Answers the next question and appends the round to the session.
    pub fn ask(&self, session: &mut Session, question: &str) -> Result<RoundRecord> {
        let tokens = tokenize(question);
        if tokens.is_empty() {
            return Err(HearError::InvalidArgument("question is empty".into()));
        }
        if tokens.len() > self.max_question_tokens {
            return Err(HearError::SequenceTooLong { len: tokens.len(), max: self.max_question_tokens });
        }
        let start = Instant::now();
        let instance = self.instance_for(session, question)?;
        let clip = self.clip(&session.clip_id)?;
        let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
        let decision = relatedness(self.estimator.as_ref(), &self.keywords, self.sal_mode, &refs);
        let fused = self.model.fused_value(&clip.track, decision.fusion())?;
        let answer = beam_decode(&self.model, &fused, &instance, &self.decode)?;
        let record = RoundRecord {
            round: session.rounds.len() + 1,
            question: tokens.join(" "),
            answer: self.model.vocab.decode(&answer),
            decision,
            decode_ms: start.elapsed().as_secs_f64() * 1e3,
            question_ids: instance.question.clone(),
            answer_ids: answer,
        };
        session.rounds.push(record.clone());
        Ok(record)
    }
}
