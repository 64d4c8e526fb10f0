//! Dataset on disk through evaluation and the session engine.

use std::collections::BTreeMap;

use hear_core::data::avsd::LoadMode;
use hear_core::data::dataset::{load_dataset, write_synth_dataset};
use hear_core::data::synth::{synth_corpus, SynthCorpusConfig};
use hear_core::data::{DialogueInstance, FeatureTrack};
use hear_core::decode::DecodeConfig;
use hear_core::dlm::{DlmConfig, DlmModel};
use hear_core::eval::{evaluate, Bucket, EvalConfig};
use hear_core::sal::{KeywordSet, SalMode};
use hear_core::session::{Clip, DialogueEngine, Session};

fn tiny_model(vocab: hear_core::data::Vocabulary) -> DlmModel {
    let cfg = DlmConfig {
        width: 16,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ff_hidden: 32,
        recon_hidden: 16,
        max_len: 160,
        video_dim: 32,
        audio_dim: 8,
        seed: 9,
    };
    DlmModel::new(cfg, vocab).unwrap()
}

#[test]
fn loaded_dataset_evaluates_like_the_engine_answers() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(&SynthCorpusConfig { clips: 3, seed: 4, ..Default::default() }).unwrap();
    write_synth_dataset(dir.path(), &corpus).unwrap();
    let ds = load_dataset(dir.path(), LoadMode::Strict).unwrap();
    let keywords = KeywordSet::default();
    let vocab = ds.build_vocab(&keywords);
    let model = tiny_model(vocab.clone());
    let items = ds.items(&[0, 1, 2], &vocab, 3);
    assert_eq!(items.len(), 24);
    let pairs: Vec<(&DialogueInstance, &FeatureTrack)> = items.iter().map(|(i, t)| (i, t.as_ref())).collect();
    let decode = DecodeConfig { beam: 2, max_len: 6, ..Default::default() };
    let cfg = EvalConfig { decode: decode.clone(), sal_mode: SalMode::Keyword, without_audio: true };
    let report = evaluate(&model, None, &keywords, &pairs, &cfg).unwrap();
    assert_eq!(report.overall.count, 24);
    assert_eq!(report.keyword_bucket.count, report.rows.iter().filter(|r| r.in_bucket(Bucket::Keyword)).count());
    assert!(report.overall_without_audio.is_some());

    // Replaying the first clip's dialogue through a session reproduces the
    // report rows whenever the gold history equals the generated one; for
    // round one there is no history, so it must match.
    let clip_id = ds.dialogues[0].clip_id.clone();
    let clips: BTreeMap<String, Clip> = ds
        .dialogues
        .iter()
        .map(|d| (d.clip_id.clone(), Clip { caption: d.caption.clone(), track: ds.tracks[&d.clip_id].as_ref().clone() }))
        .collect();
    let mut engine = DialogueEngine::new(model, None, clips);
    engine.sal_mode = SalMode::Keyword;
    engine.decode = decode;
    let mut s = Session::new("x", clip_id.clone());
    let rec = engine.ask(&mut s, &ds.dialogues[0].rounds[0].0).unwrap();
    let row = report.rows.iter().find(|r| r.clip_id == clip_id && r.round == 1).unwrap();
    assert_eq!(rec.answer, row.candidate);
    assert_eq!(rec.decision, row.decision);
}
