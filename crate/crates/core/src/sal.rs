//! Question-conditioned audio/video weighting.
//!
//! Two decision rules decide how much the model should listen: a keyword
//! match against a fixed audio vocabulary, and a learned estimator that maps
//! a question to a relatedness score `r` in (0, 1). The estimator is trained
//! on keyword-derived labels plus two kinds of synthetic negatives (shuffled
//! audio questions and non-audio questions with a keyword swapped in) so it
//! cannot just memorise keywords.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Tensor, Var};
use crate::data::vocab::CLS;
use crate::data::{tokenize, DialogueInstance, FeatureTrack, Vocabulary};
use crate::dlm::{DlmModel, Fusion};
use crate::error::{config_err, HearError, Result};
use crate::metrics::auc;
use crate::nn::{EncoderLayer, LayerNorm, Linear, NamedTensor, ParamStore};
use crate::optim::{mean_gradients, AdamW, AdamWConfig};

/// The audio keyword list.
pub const BASE_KEYWORDS: [&str; 19] = [
    "noise", "sound", "voice", "speech", "speak", "talk", "listen", "hear", "say", "sing", "music", "audio", "call",
    "hum", "loud", "tones", "utter", "volume", "song",
];

/// Score above which a question counts as audio-related in breakdowns.
pub const AUDIO_BUCKET_THRESHOLD: f64 = 0.7;

/// Keywords plus naive plural forms. Matching is per token and
/// case-insensitive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeywordSet {
    base: Vec<String>,
    forms: HashSet<String>,
}

impl Default for KeywordSet {
    fn default() -> Self {
        Self::new(BASE_KEYWORDS.iter().copied())
    }
}

impl KeywordSet {
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let base: Vec<String> = words.into_iter().map(|w| w.trim().to_lowercase()).filter(|w| !w.is_empty()).collect();
        let forms = base.iter().flat_map(|w| [w.clone(), format!("{w}s"), format!("{w}es")]).collect();
        Self { base, forms }
    }

    /// One keyword per line; blank lines and `#` comments are ignored.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let set = Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')));
        if set.base.is_empty() {
            return Err(HearError::InvalidArgument(format!("{}: no keywords", path.display())));
        }
        Ok(set)
    }

    pub fn base(&self) -> &[String] {
        &self.base
    }

    /// Base words and plural forms.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        let mut all: Vec<&str> = self.forms.iter().map(String::as_str).collect();
        all.sort_unstable();
        all.into_iter()
    }

    pub fn matches(&self, token: &str) -> bool {
        self.forms.contains(&token.to_lowercase())
    }

    /// Keywords (base form) present in a tokenised question.
    pub fn hits<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .base
            .iter()
            .filter(|b| {
                tokens.iter().any(|t| {
                    let t = t.as_ref().to_lowercase();
                    t == **b || t == format!("{b}s") || t == format!("{b}es")
                })
            })
            .map(String::as_str)
            .collect();
        out.dedup();
        out
    }

    pub fn contains_audio_keyword<S: AsRef<str>>(&self, tokens: &[S]) -> bool {
        tokens.iter().any(|t| self.matches(t.as_ref()))
    }
}

/// Which fusion rule feeds the dialogue model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SalMode {
    /// Plain concatenation, no question conditioning.
    None,
    /// Zero the video when the question has an audio keyword.
    Keyword,
    /// Scale audio by `r` and video by `1 - r`.
    #[default]
    Estimator,
    /// Keyword gate when a keyword is present, estimator weighting otherwise.
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatingMode {
    KeywordGate,
    EstimatorCalibrate,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelatednessDecision {
    pub keyword_hit: bool,
    pub score: f64,
    pub mode: GatingMode,
}

impl RelatednessDecision {
    pub fn fusion(&self) -> Fusion {
        match self.mode {
            GatingMode::KeywordGate => Fusion::VideoMasked,
            GatingMode::EstimatorCalibrate => Fusion::Calibrated(self.score),
            GatingMode::None => Fusion::Plain,
        }
    }
}

/// Combines the keyword verdict and estimator score under `mode`.
pub fn decide(mode: SalMode, keyword_hit: bool, score: f64) -> RelatednessDecision {
    let gating = match mode {
        SalMode::None => GatingMode::None,
        SalMode::Keyword => {
            if keyword_hit {
                GatingMode::KeywordGate
            } else {
                GatingMode::None
            }
        }
        SalMode::Estimator => GatingMode::EstimatorCalibrate,
        SalMode::Both => {
            if keyword_hit {
                GatingMode::KeywordGate
            } else {
                GatingMode::EstimatorCalibrate
            }
        }
    };
    RelatednessDecision { keyword_hit, score, mode: gating }
}

/// Keyword gating: `[u || 0] W` for audio questions, `[u || v] W` otherwise.
pub fn keyword_gate_fuse<S: AsRef<str>>(
    model: &DlmModel,
    keywords: &KeywordSet,
    track: &FeatureTrack,
    question: &[S],
) -> Result<Tensor> {
    let fusion = if keywords.contains_audio_keyword(question) { Fusion::VideoMasked } else { Fusion::Plain };
    model.fused_value(track, fusion)
}

/// `[r u || (1 - r) v] W`
pub fn calibrated_fuse(model: &DlmModel, track: &FeatureTrack, r: f64) -> Result<Tensor> {
    model.fused_value(track, Fusion::Calibrated(r))
}

/// Answer cross-entropy over a question-conditioned fused sequence.
pub fn sal_loss(model: &DlmModel, instance: &DialogueInstance, fused: &Tensor) -> Result<f64> {
    let mut g = Graph::new(model.params.tensors());
    let f = g.constant(fused.clone());
    let loss = model.answer_loss(&mut g, f, instance)?;
    Ok(g.scalar(loss))
}

/// Graph form of the SAL loss for a given fusion.
pub fn sal_loss_graph(
    model: &DlmModel,
    g: &mut Graph,
    instance: &DialogueInstance,
    track: &FeatureTrack,
    fusion: Fusion,
) -> Result<Var> {
    let fused = model.fuse(g, track, fusion)?;
    model.answer_loss(g, fused, instance)
}

/// SAL loss and its derivative with respect to the calibration weight `r`.
pub fn sal_loss_and_r_grad(
    model: &DlmModel,
    instance: &DialogueInstance,
    track: &FeatureTrack,
    r: f64,
) -> Result<(f64, f64)> {
    let mut g = Graph::new(model.params.tensors());
    let rv = g.input(Tensor::from_elem((1, 1), r));
    let fused = model.fuse_calibrated_var(&mut g, track, rv)?;
    let loss = model.answer_loss(&mut g, fused, instance)?;
    let grads = g.backward(loss);
    let dr = grads.wrt(rv).map_or(0.0, |t| t[[0, 0]]);
    Ok((g.scalar(loss), dr))
}

// ---------------------------------------------------------------------------
// Noisy-label construction

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Keyword,
    Shuffle,
    Swap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuestion {
    pub tokens: Vec<String>,
    pub label: f64,
    pub provenance: Provenance,
}

impl LabeledQuestion {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn is_positive(&self) -> bool {
        self.label > 0.5
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    /// Fraction of keyword-negative questions that get a swapped-in keyword copy.
    pub swap_fraction: f64,
    pub seed: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self { swap_fraction: 0.5, seed: 0 }
    }
}

/// Keyword labels plus shuffle and swap negatives. Deterministic per seed.
pub fn build_estimator_labels<S: AsRef<str>>(
    questions: &[Vec<S>],
    keywords: &KeywordSet,
    cfg: &LabelConfig,
) -> Result<Vec<LabeledQuestion>> {
    if questions.is_empty() {
        return Err(HearError::InvalidArgument("no questions to label".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(questions.len() * 2);
    for q in questions {
        let tokens: Vec<String> = q.iter().map(|t| t.as_ref().to_lowercase()).collect();
        if tokens.is_empty() {
            continue;
        }
        let positive = keywords.contains_audio_keyword(&tokens);
        out.push(LabeledQuestion {
            tokens: tokens.clone(),
            label: if positive { 1.0 } else { 0.0 },
            provenance: Provenance::Keyword,
        });
        if positive {
            if let Some(shuffled) = distinct_shuffle(&tokens, &mut rng) {
                out.push(LabeledQuestion { tokens: shuffled, label: 0.0, provenance: Provenance::Shuffle });
            }
        } else if rng.gen_bool(cfg.swap_fraction.clamp(0.0, 1.0)) {
            let mut swapped = tokens.clone();
            let pos = rng.gen_range(0..swapped.len());
            let kw = &keywords.base()[rng.gen_range(0..keywords.base().len())];
            swapped[pos] = kw.clone();
            out.push(LabeledQuestion { tokens: swapped, label: 0.0, provenance: Provenance::Swap });
        }
    }
    if out.is_empty() {
        return Err(HearError::InvalidArgument("no non-empty questions to label".into()));
    }
    Ok(out)
}

/// A random permutation that differs from the input, or `None` when every
/// permutation is the identity.
fn distinct_shuffle(tokens: &[String], rng: &mut ChaCha8Rng) -> Option<Vec<String>> {
    if tokens.iter().all(|t| *t == tokens[0]) {
        return None;
    }
    let mut shuffled = tokens.to_vec();
    loop {
        shuffled.shuffle(rng);
        if shuffled != tokens {
            return Some(shuffled);
        }
    }
}

/// Line-delimited export: `{"question", "label", "provenance"}` per line.
pub fn write_labeled_jsonl(path: &Path, set: &[LabeledQuestion]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for q in set {
        let rec = serde_json::json!({"question": q.text(), "label": q.label, "provenance": q.provenance});
        writeln!(f, "{rec}")?;
    }
    Ok(())
}

/// Seeded split into `(train, holdout)`.
pub fn split_labeled(set: &[LabeledQuestion], holdout_fraction: f64, seed: u64) -> (Vec<LabeledQuestion>, Vec<LabeledQuestion>) {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED));
    let n_hold = ((set.len() as f64) * holdout_fraction).round() as usize;
    let (hold, train) = idx.split_at(n_hold.min(set.len()));
    (train.iter().map(|&i| set[i].clone()).collect(), hold.iter().map(|&i| set[i].clone()).collect())
}

// ---------------------------------------------------------------------------
// Semantic estimator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_hidden: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 2,
            layers: 1,
            ff_hidden: 64,
            max_len: 32,
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.01,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct EstimatorLayout {
    tok_emb: usize,
    pos_emb: usize,
    in_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
    out_norm: LayerNorm,
    head: Linear,
}

/// Bidirectional attention encoder with a classification token and a
/// sigmoid head.
#[derive(Clone, Debug)]
pub struct EstimatorModel {
    pub config: EstimatorConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    layout: EstimatorLayout,
}

const LOGIT_CLAMP: f64 = 30.0;

impl EstimatorModel {
    pub fn new(config: EstimatorConfig, vocab: Vocabulary) -> Result<Self> {
        if config.width == 0 || config.heads == 0 || !config.width.is_multiple_of(config.heads) {
            return Err(config_err("estimator.heads", "must divide a non-zero estimator.width"));
        }
        if config.max_len < 2 {
            return Err(config_err("estimator.max_len", "must be at least 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xE571);
        let mut p = ParamStore::new();
        let d = config.width;
        let tok_emb = p.add_uniform("tok_emb", (vocab.len(), d), d, &mut rng);
        let pos_emb = p.add_uniform("pos_emb", (config.max_len, d), d, &mut rng);
        let in_norm = LayerNorm::new(&mut p, "in_norm", d);
        let layers = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut p, &format!("encoder.{i}"), d, config.heads, config.ff_hidden, &mut rng))
            .collect();
        let out_norm = LayerNorm::new(&mut p, "out_norm", d);
        let head = Linear::new(&mut p, "head", d, 1, &mut rng);
        let layout = EstimatorLayout { tok_emb, pos_emb, in_norm, layers, out_norm, head };
        Ok(Self { config, vocab, params: p, layout })
    }

    fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        std::iter::once(CLS)
            .chain(tokens.iter().map(|t| self.vocab.id(&t.as_ref().to_lowercase())))
            .take(self.config.max_len)
            .collect()
    }

    /// Pre-sigmoid output as a graph node.
    pub fn logit_graph<S: AsRef<str>>(&self, g: &mut Graph, tokens: &[S]) -> Var {
        let ids = self.ids(tokens);
        let tok = g.param(self.layout.tok_emb);
        let pos = g.param(self.layout.pos_emb);
        let t = g.gather(tok, &ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.gather(pos, &positions);
        let mut x = g.add(t, p);
        x = self.layout.in_norm.forward(g, x);
        for layer in &self.layout.layers {
            x = layer.forward(g, x);
        }
        let x = self.layout.out_norm.forward(g, x);
        let cls = g.select_rows(x, &[0]);
        self.layout.head.forward(g, cls)
    }

    pub fn logit<S: AsRef<str>>(&self, tokens: &[S]) -> f64 {
        let mut g = Graph::new(self.params.tensors());
        let z = self.logit_graph(&mut g, tokens);
        g.scalar(z)
    }

    /// Relatedness score, strictly inside (0, 1).
    pub fn score<S: AsRef<str>>(&self, tokens: &[S]) -> f64 {
        sigmoid(self.logit(tokens).clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
    }

    pub fn score_text(&self, question: &str) -> f64 {
        self.score(&tokenize(question))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = EstimatorCheckpoint {
            format: ESTIMATOR_FORMAT.into(),
            version: 1,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.to_named(),
        };
        fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: EstimatorCheckpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ckpt.format != ESTIMATOR_FORMAT || ckpt.version != 1 {
            return Err(HearError::Checkpoint(format!("unsupported estimator {} v{}", ckpt.format, ckpt.version)));
        }
        let mut m = Self::new(ckpt.config, ckpt.vocab)?;
        m.params.load_named(&ckpt.params)?;
        Ok(m)
    }
}

const ESTIMATOR_FORMAT: &str = "hear-estimator";

#[derive(Serialize, Deserialize)]
struct EstimatorCheckpoint {
    format: String,
    version: u32,
    config: EstimatorConfig,
    vocab: Vocabulary,
    params: Vec<NamedTensor>,
}

/// Keyword verdict plus estimator score for one question.
pub fn estimate_relatedness<S: AsRef<str>>(
    estimator: &EstimatorModel,
    keywords: &KeywordSet,
    mode: SalMode,
    question: &[S],
) -> RelatednessDecision {
    decide(mode, keywords.contains_audio_keyword(question), estimator.score(question))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub holdout_auc: f64,
    pub train_size: usize,
    pub holdout_size: usize,
    pub epoch_losses: Vec<f64>,
}

/// Vocabulary covering the labeled questions and every keyword form.
pub fn estimator_vocab(set: &[LabeledQuestion], keywords: &KeywordSet) -> Vocabulary {
    let texts: Vec<String> = set.iter().map(LabeledQuestion::text).collect();
    let extra: Vec<&str> = keywords.words().collect();
    Vocabulary::build(texts.iter().map(String::as_str), &extra)
}

/// Splits, trains and reports held-out AUC.
pub fn train_estimator(
    set: &[LabeledQuestion],
    keywords: &KeywordSet,
    cfg: &EstimatorConfig,
) -> Result<(EstimatorModel, EstimatorReport)> {
    let (train, holdout) = split_labeled(set, cfg.holdout_fraction, cfg.seed);
    train_estimator_split(&train, &holdout, estimator_vocab(set, keywords), cfg)
}

/// Trains on `train` with inverse-class-frequency weighted squared error and
/// weight decay; scores `holdout` for AUC.
pub fn train_estimator_split(
    train: &[LabeledQuestion],
    holdout: &[LabeledQuestion],
    vocab: Vocabulary,
    cfg: &EstimatorConfig,
) -> Result<(EstimatorModel, EstimatorReport)> {
    let positives = train.iter().filter(|q| q.is_positive()).count();
    let negatives = train.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(HearError::InvalidArgument("estimator training needs both classes".into()));
    }
    let n = train.len() as f64;
    let w_pos = n / (2.0 * positives as f64);
    let w_neg = n / (2.0 * negatives as f64);

    let mut model = EstimatorModel::new(cfg.clone(), vocab)?;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() }, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xBA7C);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let items: Vec<&LabeledQuestion> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = mean_gradients(&model.params, &items, |g, q| {
                let z = model.logit_graph(g, &q.tokens);
                let s = g.sigmoid(z);
                let err = g.add_scalar(s, -q.label);
                let sq = g.mul(err, err);
                let w = if q.is_positive() { w_pos } else { w_neg };
                Ok(g.scale(sq, w))
            })?;
            opt.update(&mut model.params, &grads, cfg.lr);
            total += loss * chunk.len() as f64;
        }
        epoch_losses.push(total / n);
    }
    let holdout_auc = holdout_auc(&model, holdout);
    Ok((model, EstimatorReport { holdout_auc, train_size: train.len(), holdout_size: holdout.len(), epoch_losses }))
}

/// AUC of estimator scores on a labeled set (0.5 when a class is missing).
pub fn holdout_auc(model: &EstimatorModel, set: &[LabeledQuestion]) -> f64 {
    let scores: Vec<f64> = set.iter().map(|q| model.score(&q.tokens)).collect();
    let labels: Vec<bool> = set.iter().map(LabeledQuestion::is_positive).collect();
    auc(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dlm::DlmConfig;
    use ndarray::Array2;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn keyword_examples() {
        let k = KeywordSet::default();
        assert_eq!(k.base().len(), 19);
        assert!(k.contains_audio_keyword(&toks("can you hear any sounds ?")));
        assert!(k.contains_audio_keyword(&toks("Do they speak to each other?")));
        assert!(!k.contains_audio_keyword(&toks("what color is his hair ?")));
        assert!(!k.contains_audio_keyword(&toks("is the vacuum cleaner working ?")));
        assert!(!k.contains_audio_keyword(&toks("who is outside the door ?")));
        // "tell" is not in the list.
        assert!(!k.contains_audio_keyword(&toks("can you tell where he goes ?")));
        // Token-level: no substring matches.
        assert!(!k.contains_audio_keyword(&toks("is he a hearty eater ?")));
        assert!(k.contains_audio_keyword(&toks("any NOISES ?")));
        assert!(k.contains_audio_keyword(&toks("two songs")));
    }

    #[test]
    fn keyword_file_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("kw.txt");
        fs::write(&p, "# audio words\nbark\n\nTell\n").unwrap();
        let k = KeywordSet::from_file(&p).unwrap();
        assert!(k.contains_audio_keyword(&toks("dogs barks loudly")));
        assert!(k.contains_audio_keyword(&toks("can you tell")));
        assert!(!k.contains_audio_keyword(&toks("hear")));
    }

    #[test]
    fn labels_follow_augmentation_scheme() {
        let k = KeywordSet::default();
        let qs = vec![toks("can you hear any sounds ?"), toks("what color is his hair ?")];
        let set = build_estimator_labels(&qs, &k, &LabelConfig { swap_fraction: 1.0, seed: 1 }).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set[0].label, 1.0);
        assert_eq!(set[1].provenance, Provenance::Shuffle);
        assert_eq!(set[1].label, 0.0);
        let mut a = set[1].tokens.clone();
        let mut b = set[0].tokens.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_ne!(set[1].tokens, set[0].tokens);
        assert_eq!(set[2].label, 0.0);
        assert_eq!(set[3].provenance, Provenance::Swap);
        assert_eq!(set[3].label, 0.0);
        assert!(k.contains_audio_keyword(&set[3].tokens));
        let again = build_estimator_labels(&qs, &k, &LabelConfig { swap_fraction: 1.0, seed: 1 }).unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn single_token_positive_skips_shuffle() {
        let k = KeywordSet::default();
        let set = build_estimator_labels(&[vec!["sound"]], &k, &LabelConfig::default()).unwrap();
        assert_eq!(set.len(), 1);
        assert!(build_estimator_labels::<&str>(&[], &k, &LabelConfig::default()).is_err());
    }

    #[test]
    fn decision_modes() {
        assert_eq!(decide(SalMode::Keyword, true, 0.2).fusion(), Fusion::VideoMasked);
        assert_eq!(decide(SalMode::Keyword, false, 0.9).fusion(), Fusion::Plain);
        assert_eq!(decide(SalMode::Estimator, true, 0.3).fusion(), Fusion::Calibrated(0.3));
        assert_eq!(decide(SalMode::Both, false, 0.3).fusion(), Fusion::Calibrated(0.3));
        assert_eq!(decide(SalMode::Both, true, 0.3).fusion(), Fusion::VideoMasked);
        assert_eq!(decide(SalMode::None, true, 0.9).fusion(), Fusion::Plain);
    }

    fn tiny_model() -> (DlmModel, FeatureTrack, DialogueInstance) {
        let vocab = Vocabulary::build(["can you hear any sounds ? yes music what color is his hair"], &[]);
        let cfg = DlmConfig {
            width: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_hidden: 8,
            recon_hidden: 4,
            max_len: 32,
            video_dim: 3,
            audio_dim: 2,
            seed: 5,
        };
        let model = DlmModel::new(cfg, vocab.clone()).unwrap();
        let track = FeatureTrack::new(
            Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3),
            Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64 * 0.2 - 0.1),
        )
        .unwrap();
        let inst = DialogueInstance::from_rounds(
            "c",
            vec![],
            &[],
            vocab.encode("can you hear any sounds ?"),
            vocab.encode("yes music"),
            3,
        );
        (model, track, inst)
    }

    #[test]
    fn gated_fusion_ignores_video_for_audio_questions() {
        let (model, track, _) = tiny_model();
        let k = KeywordSet::default();
        let q = toks("can you hear any sounds ?");
        let a = keyword_gate_fuse(&model, &k, &track, &q).unwrap();
        let other = FeatureTrack::new(track.video.mapv(|v| v * 7.0 + 1.0), track.audio.clone()).unwrap();
        let b = keyword_gate_fuse(&model, &k, &other, &q).unwrap();
        assert_eq!(a, b);
        let visual = toks("what color is his hair ?");
        assert_eq!(keyword_gate_fuse(&model, &k, &track, &visual).unwrap(), model.embed_av(&track).unwrap());
        let silent = FeatureTrack::new(track.video.clone(), Array2::zeros((4, 2))).unwrap();
        assert!(keyword_gate_fuse(&model, &k, &silent, &q).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn calibrated_fusion_decomposes() {
        let (model, track, _) = tiny_model();
        let r = 0.37;
        let audio_only = FeatureTrack::new(Array2::zeros(track.video.raw_dim()), track.audio.clone()).unwrap();
        let video_only = FeatureTrack::new(track.video.clone(), Array2::zeros(track.audio.raw_dim())).unwrap();
        let lhs = calibrated_fuse(&model, &track, r).unwrap();
        let rhs = model.embed_av(&audio_only).unwrap() * r + model.embed_av(&video_only).unwrap() * (1.0 - r);
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let one = calibrated_fuse(&model, &track, 1.0).unwrap();
        let changed = FeatureTrack::new(track.video.mapv(|v| v - 3.0), track.audio.clone()).unwrap();
        assert_eq!(one, calibrated_fuse(&model, &changed, 1.0).unwrap());
        let twos = FeatureTrack::new(Array2::from_elem((4, 3), 4.0), Array2::from_elem((4, 2), 2.0)).unwrap();
        let ones = FeatureTrack::new(Array2::from_elem((4, 3), 2.0), Array2::from_elem((4, 2), 1.0)).unwrap();
        assert_eq!(calibrated_fuse(&model, &twos, 0.5).unwrap(), model.embed_av(&ones).unwrap());
    }

    #[test]
    fn sal_loss_reduces_to_dlm_loss() {
        let (model, track, inst) = tiny_model();
        let plain = model.embed_av(&track).unwrap();
        let target = crate::dlm::answer_target(&inst.answer);
        let logits = model.dlm_forward(&plain, &inst, &target).unwrap();
        let direct = crate::dlm::dlm_loss(&logits, &target);
        assert!((sal_loss(&model, &inst, &plain).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn sal_r_gradient_matches_finite_difference() {
        let (model, track, inst) = tiny_model();
        let r = 0.6;
        let (_, analytic) = sal_loss_and_r_grad(&model, &inst, &track, r).unwrap();
        let eps = 1e-6;
        let f = |r: f64| sal_loss(&model, &inst, &calibrated_fuse(&model, &track, r).unwrap()).unwrap();
        let numeric = (f(r + eps) - f(r - eps)) / (2.0 * eps);
        assert!((analytic - numeric).abs() / analytic.abs().max(numeric.abs()) < 1e-4, "{analytic} vs {numeric}");
    }

    #[test]
    fn estimator_scores_in_open_interval() {
        let k = KeywordSet::default();
        let qs = vec![toks("can you hear music ?"), toks("what is he doing ?")];
        let set = build_estimator_labels(&qs, &k, &LabelConfig::default()).unwrap();
        let m = EstimatorModel::new(EstimatorConfig::default(), estimator_vocab(&set, &k)).unwrap();
        for q in ["can you hear music ?", "", "zzz unknown words"] {
            let s = m.score_text(q);
            assert!(s > 0.0 && s < 1.0);
            assert_eq!(s, m.score_text(q));
        }
    }

    #[test]
    fn estimator_training_rejects_single_class() {
        let set = vec![LabeledQuestion { tokens: toks("a b"), label: 1.0, provenance: Provenance::Keyword }];
        let vocab = estimator_vocab(&set, &KeywordSet::default());
        assert!(train_estimator_split(&set, &set, vocab, &EstimatorConfig::default()).is_err());
    }
}
