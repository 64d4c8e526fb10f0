//! Ingestion of AVSD-style dialogue JSON.
//!
//! Accepts either a top-level array of dialogues or the public release layout
//! `{"dialogs": [...]}`. Each dialogue carries a clip identifier
//! (`image_id`, `clip_id` or `vid`), a `caption`, and a `dialog` list of
//! `{"question", "answer"}` objects.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DialogueInstance, QaPair, Vocabulary};
use crate::error::{HearError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    /// Skip records with missing fields, logging a warning.
    #[default]
    Tolerant,
    /// Fail on the first incomplete record.
    Strict,
}

/// One raw dialogue before tokenisation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvsdDialogue {
    pub clip_id: String,
    pub caption: String,
    pub rounds: Vec<(String, String)>,
}

impl AvsdDialogue {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.caption.as_str()).chain(self.rounds.iter().flat_map(|(q, a)| [q.as_str(), a.as_str()]))
    }

    pub fn to_instances(&self, vocab: &Vocabulary, window: usize) -> Vec<DialogueInstance> {
        let rounds: Vec<QaPair> = self.rounds.iter().map(|(q, a)| (vocab.encode(q), vocab.encode(a))).collect();
        DialogueInstance::expand_dialogue(&self.clip_id, &vocab.encode(&self.caption), &rounds, window)
    }
}

fn record_name(index: usize, rec: &Value) -> String {
    match clip_id(rec) {
        Some(id) => format!("#{index} ({id})"),
        None => format!("#{index}"),
    }
}

fn clip_id(rec: &Value) -> Option<String> {
    ["image_id", "clip_id", "vid"].iter().find_map(|k| match rec.get(*k) {
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Number(n)) => Some(n.to_string()),
        _ => None,
    })
}

fn parse_record(rec: &Value) -> std::result::Result<AvsdDialogue, String> {
    if !rec.is_object() {
        return Err("record is not an object".into());
    }
    let clip_id = clip_id(rec).ok_or("missing clip identifier")?;
    let caption = rec.get("caption").and_then(Value::as_str).ok_or("missing caption")?.to_string();
    let dialog = rec.get("dialog").ok_or("missing dialog")?;
    let turns = dialog.as_array().ok_or("dialog is not a list")?;
    let mut rounds = Vec::with_capacity(turns.len());
    for (i, turn) in turns.iter().enumerate() {
        let q = turn.get("question").and_then(Value::as_str).ok_or(format!("turn {i}: missing question"))?;
        let a = turn.get("answer").and_then(Value::as_str).ok_or(format!("turn {i}: missing answer"))?;
        rounds.push((q.to_string(), a.to_string()));
    }
    Ok(AvsdDialogue { clip_id, caption, rounds })
}

/// Parses AVSD JSON text into raw dialogues.
pub fn parse_avsd(text: &str, mode: LoadMode) -> Result<Vec<AvsdDialogue>> {
    let doc: Value = serde_json::from_str(text)?;
    let records = match &doc {
        Value::Array(items) => items,
        Value::Object(map) => map.get("dialogs").and_then(Value::as_array).ok_or_else(|| HearError::Avsd {
            record: "<root>".into(),
            reason: "expected a list of dialogues or an object with a \"dialogs\" list".into(),
        })?,
        _ => {
            return Err(HearError::Avsd { record: "<root>".into(), reason: "expected a list of dialogues".into() })
        }
    };
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        match parse_record(rec) {
            Ok(d) => out.push(d),
            Err(reason) => match mode {
                LoadMode::Strict => return Err(HearError::Avsd { record: record_name(i, rec), reason }),
                LoadMode::Tolerant => log::warn!("skipping dialogue {}: {reason}", record_name(i, rec)),
            },
        }
    }
    Ok(out)
}

pub fn read_avsd(path: &Path, mode: LoadMode) -> Result<Vec<AvsdDialogue>> {
    parse_avsd(&fs::read_to_string(path)?, mode)
}

/// Reads a file and expands every dialogue into per-round instances.
pub fn load_avsd(path: &Path, vocab: &Vocabulary, window: usize, mode: LoadMode) -> Result<Vec<DialogueInstance>> {
    Ok(read_avsd(path, mode)?.iter().flat_map(|d| d.to_instances(vocab, window)).collect())
}

/// Serialises dialogues in the `{"dialogs": [...]}` layout.
pub fn to_avsd_json(dialogues: &[AvsdDialogue]) -> Value {
    let dialogs: Vec<Value> = dialogues
        .iter()
        .map(|d| {
            serde_json::json!({
                "image_id": d.clip_id,
                "caption": d.caption,
                "dialog": d.rounds.iter().map(|(q, a)| serde_json::json!({"question": q, "answer": a})).collect::<Vec<_>>(),
            })
        })
        .collect();
    serde_json::json!({ "dialogs": dialogs })
}
