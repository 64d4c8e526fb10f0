//! On-disk dataset layout shared by the command line and the server.
//!
//! ```text
//! <dir>/dialogues.json            AVSD-format dialogues
//! <dir>/features/<clip>.video     HEARFEAT archive, frames x video_dim
//! <dir>/features/<clip>.audio     HEARFEAT archive, any row count
//! <dir>/labels.jsonl              optional, synthetic ground truth
//! ```
//!
//! Audio is resampled to the video frame count on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::avsd::{read_avsd, to_avsd_json, AvsdDialogue, LoadMode};
use super::features::{load_feature_track, write_archive, FeatureTrack};
use super::synth::{QuestionLabel, SynthCorpus};
use super::{DialogueInstance, Vocabulary};
use crate::error::{HearError, Result};
use crate::sal::KeywordSet;

pub const DIALOGUES_FILE: &str = "dialogues.json";
pub const FEATURES_DIR: &str = "features";
pub const LABELS_FILE: &str = "labels.jsonl";

pub fn video_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join(FEATURES_DIR).join(format!("{clip_id}.video"))
}

pub fn audio_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join(FEATURES_DIR).join(format!("{clip_id}.audio"))
}

/// Ground truth line in `labels.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub clip_id: String,
    pub round: usize,
    #[serde(flatten)]
    pub label: QuestionLabel,
}

/// Dialogues with their feature tracks, in file order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dialogues: Vec<AvsdDialogue>,
    pub tracks: BTreeMap<String, Arc<FeatureTrack>>,
    /// Present for synthetic data only.
    pub labels: Option<Vec<LabelRecord>>,
}

impl Dataset {
    /// Vocabulary over every dialogue text plus the keyword forms.
    pub fn build_vocab(&self, keywords: &KeywordSet) -> Vocabulary {
        let extra: Vec<&str> = keywords.words().collect();
        Vocabulary::build(self.dialogues.iter().flat_map(AvsdDialogue::texts), &extra)
    }

    pub fn clip_ids(&self) -> Vec<&str> {
        self.dialogues.iter().map(|d| d.clip_id.as_str()).collect()
    }

    /// Instances paired with their tracks for the dialogues at `indices`.
    pub fn items(&self, indices: &[usize], vocab: &Vocabulary, window: usize) -> Vec<(DialogueInstance, Arc<FeatureTrack>)> {
        indices
            .iter()
            .flat_map(|&i| {
                let d = &self.dialogues[i];
                let track = Arc::clone(&self.tracks[&d.clip_id]);
                d.to_instances(vocab, window).into_iter().map(move |inst| (inst, Arc::clone(&track)))
            })
            .collect()
    }

    /// Label for a clip round, when ground truth exists.
    pub fn label(&self, clip_id: &str, round: usize) -> Option<QuestionLabel> {
        self.labels.as_ref()?.iter().find(|l| l.clip_id == clip_id && l.round == round).map(|l| l.label)
    }
}

/// Reads a dataset directory. Every dialogue needs both archives.
pub fn load_dataset(dir: &Path, mode: LoadMode) -> Result<Dataset> {
    let dialogues = read_avsd(&dir.join(DIALOGUES_FILE), mode)?;
    let mut tracks = BTreeMap::new();
    for d in &dialogues {
        if tracks.contains_key(&d.clip_id) {
            continue;
        }
        let track = load_feature_track(&video_path(dir, &d.clip_id), &audio_path(dir, &d.clip_id))?;
        tracks.insert(d.clip_id.clone(), Arc::new(track));
    }
    let labels_path = dir.join(LABELS_FILE);
    let labels = if labels_path.exists() {
        let text = fs::read_to_string(&labels_path)?;
        let rows = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Some(rows)
    } else {
        None
    };
    Ok(Dataset { dialogues, tracks, labels })
}

/// Writes dialogues and tracks in the layout above.
pub fn write_dataset(dir: &Path, dialogues: &[AvsdDialogue], tracks: &BTreeMap<String, FeatureTrack>) -> Result<()> {
    fs::create_dir_all(dir.join(FEATURES_DIR))?;
    for d in dialogues {
        if !tracks.contains_key(&d.clip_id) {
            return Err(HearError::InvalidArgument(format!("no features for clip {}", d.clip_id)));
        }
    }
    fs::write(dir.join(DIALOGUES_FILE), serde_json::to_string_pretty(&to_avsd_json(dialogues))?)?;
    for (clip, track) in tracks {
        write_archive(&video_path(dir, clip), &track.video)?;
        write_archive(&audio_path(dir, clip), &track.audio)?;
    }
    Ok(())
}

/// Writes a synthetic corpus, ground-truth labels included.
pub fn write_synth_dataset(dir: &Path, corpus: &SynthCorpus) -> Result<()> {
    let dialogues: Vec<AvsdDialogue> = corpus
        .clips
        .iter()
        .map(|c| AvsdDialogue { clip_id: c.clip_id.clone(), caption: c.caption.clone(), rounds: c.rounds.clone() })
        .collect();
    let tracks = corpus.clips.iter().map(|c| (c.clip_id.clone(), c.track.clone())).collect();
    write_dataset(dir, &dialogues, &tracks)?;
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join(LABELS_FILE))?);
    for c in &corpus.clips {
        for (i, label) in c.labels.iter().enumerate() {
            let rec = LabelRecord { clip_id: c.clip_id.clone(), round: i + 1, label: *label };
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    f.flush()?;
    Ok(())
}
