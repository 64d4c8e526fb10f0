//! Shared dialogue records, tokenisation, feature archives and corpus sources.

pub mod avsd;
pub mod dataset;
pub mod features;
pub mod synth;
pub mod vocab;

use serde::{Deserialize, Serialize};

pub use features::{load_feature_track, FeatureTrack};
pub use vocab::{tokenize, TokenId, Vocabulary};

/// Number of previous question/answer pairs kept as dialogue context.
pub const DEFAULT_HISTORY_WINDOW: usize = 3;

pub type QaPair = (Vec<TokenId>, Vec<TokenId>);

/// One answerable round of a dialogue about a clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueInstance {
    pub clip_id: String,
    pub caption: Vec<TokenId>,
    pub history: Vec<QaPair>,
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    /// 1-based round index within the dialogue.
    pub round: usize,
}

/// The last `window` pairs of `rounds`. Training, ingestion and the session
/// service all build context through this function.
pub fn history_window(rounds: &[QaPair], window: usize) -> Vec<QaPair> {
    let start = rounds.len().saturating_sub(window);
    rounds[start..].to_vec()
}

impl DialogueInstance {
    /// Builds the instance for round `previous.len() + 1`.
    pub fn from_rounds(
        clip_id: impl Into<String>,
        caption: Vec<TokenId>,
        previous: &[QaPair],
        question: Vec<TokenId>,
        answer: Vec<TokenId>,
        window: usize,
    ) -> Self {
        Self {
            clip_id: clip_id.into(),
            caption,
            history: history_window(previous, window),
            question,
            answer,
            round: previous.len() + 1,
        }
    }

    /// Expands a full dialogue into one instance per round.
    pub fn expand_dialogue(clip_id: &str, caption: &[TokenId], rounds: &[QaPair], window: usize) -> Vec<Self> {
        (0..rounds.len())
            .map(|r| {
                Self::from_rounds(
                    clip_id,
                    caption.to_vec(),
                    &rounds[..r],
                    rounds[r].0.clone(),
                    rounds[r].1.clone(),
                    window,
                )
            })
            .collect()
    }

    /// Largest token id referenced anywhere in the instance.
    pub fn max_token(&self) -> Option<TokenId> {
        self.caption
            .iter()
            .chain(self.question.iter())
            .chain(self.answer.iter())
            .chain(self.history.iter().flat_map(|(q, a)| q.iter().chain(a.iter())))
            .copied()
            .max()
    }
}
