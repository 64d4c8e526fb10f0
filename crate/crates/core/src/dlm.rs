//! The dialogue language model: a joint audio/video projection, a transformer
//! encoder over `[fused A/V ; history ; question]`, a causal answer decoder,
//! and an MLP head that reconstructs audio from encoder states.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax, log_softmax_at, Graph, Tensor, Var};
use crate::data::vocab::{BOS, EOS};
use crate::data::{DialogueInstance, FeatureTrack, TokenId, Vocabulary};
use crate::error::{config_err, HearError, Result};
use crate::nn::{causal_mask, DecoderLayer, EncoderLayer, LayerNorm, Linear, NamedTensor, ParamStore};

const SEG_AV: usize = 0;
const SEG_HISTORY: usize = 1;
const SEG_QUESTION: usize = 2;
const SEG_ANSWER: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DlmConfig {
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_hidden: usize,
    pub recon_hidden: usize,
    /// Longest encoder or decoder sequence accepted.
    pub max_len: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub seed: u64,
}

impl Default for DlmConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_hidden: 256,
            recon_hidden: 64,
            max_len: 160,
            video_dim: 32,
            audio_dim: 8,
            seed: 0,
        }
    }
}

impl DlmConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("model.width", self.width),
            ("model.heads", self.heads),
            ("model.encoder_layers", self.encoder_layers),
            ("model.decoder_layers", self.decoder_layers),
            ("model.ff_hidden", self.ff_hidden),
            ("model.recon_hidden", self.recon_hidden),
            ("model.max_len", self.max_len),
            ("model.video_dim", self.video_dim),
            ("model.audio_dim", self.audio_dim),
        ] {
            if v == 0 {
                return Err(config_err(field, "must be at least 1"));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(config_err("model.heads", "must divide model.width"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layout {
    av_proj: usize,
    tok_emb: usize,
    pos_emb: usize,
    seg_emb: usize,
    enc_in_norm: LayerNorm,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    dec_in_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    out: Linear,
    recon_hidden: Linear,
    recon_out: Linear,
}

/// How audio and video are combined before projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fusion {
    /// `[u || v] W`
    Plain,
    /// `[u || 0] W`: video replaced by zeros.
    VideoMasked,
    /// `[r u || (1 - r) v] W`
    Calibrated(f64),
}

#[derive(Clone, Debug)]
pub struct DlmModel {
    pub config: DlmConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    layout: Layout,
}

impl DlmModel {
    pub fn new(config: DlmConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let d = config.width;
        let av_in = config.audio_dim + config.video_dim;
        let av_proj = p.add_uniform("av_proj", (av_in, d), av_in, &mut rng);
        let tok_emb = p.add_uniform("tok_emb", (vocab.len(), d), d, &mut rng);
        let pos_emb = p.add_uniform("pos_emb", (config.max_len, d), d, &mut rng);
        let seg_emb = p.add_uniform("seg_emb", (4, d), d, &mut rng);
        let enc_in_norm = LayerNorm::new(&mut p, "enc_in_norm", d);
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut p, &format!("encoder.{i}"), d, config.heads, config.ff_hidden, &mut rng))
            .collect();
        let enc_norm = LayerNorm::new(&mut p, "enc_norm", d);
        let dec_in_norm = LayerNorm::new(&mut p, "dec_in_norm", d);
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut p, &format!("decoder.{i}"), d, config.heads, config.ff_hidden, &mut rng))
            .collect();
        let dec_norm = LayerNorm::new(&mut p, "dec_norm", d);
        let out = Linear::new(&mut p, "out", d, vocab.len(), &mut rng);
        let recon_hidden = Linear::new(&mut p, "recon.hidden", d, config.recon_hidden, &mut rng);
        let recon_out = Linear::new(&mut p, "recon.out", config.recon_hidden, config.audio_dim, &mut rng);
        let layout = Layout {
            av_proj,
            tok_emb,
            pos_emb,
            seg_emb,
            enc_in_norm,
            encoder,
            enc_norm,
            dec_in_norm,
            decoder,
            dec_norm,
            out,
            recon_hidden,
            recon_out,
        };
        Ok(Self { config, vocab, params: p, layout })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Parameter index of the joint audio/video projection.
    pub fn av_projection_id(&self) -> usize {
        self.layout.av_proj
    }

    /// Parameter indices of the reconstruction head.
    pub fn recon_head_ids(&self) -> [usize; 4] {
        let l = &self.layout;
        [l.recon_hidden.weight, l.recon_hidden.bias, l.recon_out.weight, l.recon_out.bias]
    }

    fn check_track(&self, track: &FeatureTrack) -> Result<()> {
        if track.audio_dim() != self.config.audio_dim || track.video_dim() != self.config.video_dim {
            return Err(HearError::Shape(format!(
                "track is audio {} / video {} but model expects {} / {}",
                track.audio_dim(),
                track.video_dim(),
                self.config.audio_dim,
                self.config.video_dim
            )));
        }
        Ok(())
    }

    /// `[audio || video] W` inside a graph.
    pub fn project_av(&self, g: &mut Graph, audio: Var, video: Var) -> Var {
        let cat = g.concat_cols(&[audio, video]);
        let w = g.param(self.layout.av_proj);
        g.matmul(cat, w)
    }

    /// Builds the fused `L×d` sequence for `fusion`.
    pub fn fuse(&self, g: &mut Graph, track: &FeatureTrack, fusion: Fusion) -> Result<Var> {
        self.check_track(track)?;
        let (audio, video) = match fusion {
            Fusion::Plain => (track.audio.clone(), track.video.clone()),
            Fusion::VideoMasked => (track.audio.clone(), Array2::zeros(track.video.raw_dim())),
            Fusion::Calibrated(r) => (&track.audio * r, &track.video * (1.0 - r)),
        };
        let a = g.constant(audio);
        let v = g.constant(video);
        Ok(self.project_av(g, a, v))
    }

    /// Calibrated fusion with the weight `r` as a graph node.
    pub fn fuse_calibrated_var(&self, g: &mut Graph, track: &FeatureTrack, r: Var) -> Result<Var> {
        self.check_track(track)?;
        let a = g.constant(track.audio.clone());
        let v = g.constant(track.video.clone());
        let ra = g.scale_by(a, r);
        let neg = g.scale(r, -1.0);
        let one_minus = g.add_scalar(neg, 1.0);
        let rv = g.scale_by(v, one_minus);
        Ok(self.project_av(g, ra, rv))
    }

    /// Fused sequence with explicit audio and video matrices (used for masking).
    pub fn fuse_raw(&self, g: &mut Graph, audio: Array2<f64>, video: Array2<f64>) -> Result<Var> {
        if audio.ncols() != self.config.audio_dim || video.ncols() != self.config.video_dim {
            return Err(HearError::Shape("audio/video width does not match the projection".into()));
        }
        let a = g.constant(audio);
        let v = g.constant(video);
        Ok(self.project_av(g, a, v))
    }

    fn text_tokens(instance: &DialogueInstance) -> (Vec<TokenId>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut segs = Vec::new();
        let mut push = |part: &[TokenId], seg: usize| {
            ids.extend_from_slice(part);
            ids.push(EOS);
            segs.extend(std::iter::repeat_n(seg, part.len() + 1));
        };
        push(&instance.caption, SEG_HISTORY);
        for (q, a) in &instance.history {
            push(q, SEG_HISTORY);
            push(a, SEG_HISTORY);
        }
        push(&instance.question, SEG_QUESTION);
        (ids, segs)
    }

    /// Number of encoder positions an instance occupies with `frames` A/V rows.
    pub fn encoder_len(instance: &DialogueInstance, frames: usize) -> usize {
        frames + Self::text_tokens(instance).0.len()
    }

    fn embed_tokens(&self, g: &mut Graph, ids: &[TokenId], segs: &[usize], offset: usize) -> Var {
        let tok = g.param(self.layout.tok_emb);
        let pos = g.param(self.layout.pos_emb);
        let seg = g.param(self.layout.seg_emb);
        let t = g.gather(tok, ids);
        let positions: Vec<usize> = (offset..offset + ids.len()).collect();
        let p = g.gather(pos, &positions);
        let s = g.gather(seg, segs);
        let x = g.add(t, p);
        g.add(x, s)
    }

    /// Encoder states for `[fused ; history ; question]`, one row per position.
    pub fn encode(&self, g: &mut Graph, fused: Var, instance: &DialogueInstance) -> Result<Var> {
        let frames = g.value(fused).nrows();
        if g.value(fused).ncols() != self.config.width {
            return Err(HearError::Shape(format!(
                "fused width {} != model width {}",
                g.value(fused).ncols(),
                self.config.width
            )));
        }
        let (ids, segs) = Self::text_tokens(instance);
        let total = frames + ids.len();
        if total > self.config.max_len {
            return Err(HearError::SequenceTooLong { len: total, max: self.config.max_len });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(HearError::IndexOutOfRange { index: bad, len: self.vocab.len() });
        }
        let pos = g.param(self.layout.pos_emb);
        let seg = g.param(self.layout.seg_emb);
        let av_pos: Vec<usize> = (0..frames).collect();
        let p = g.gather(pos, &av_pos);
        let s = g.gather(seg, &vec![SEG_AV; frames]);
        let av = g.add(fused, p);
        let av = g.add(av, s);
        let text = self.embed_tokens(g, &ids, &segs, frames);
        let mut x = g.concat_rows(&[av, text]);
        x = self.layout.enc_in_norm.forward(g, x);
        for layer in &self.layout.encoder {
            x = layer.forward(g, x);
        }
        Ok(self.layout.enc_norm.forward(g, x))
    }

    /// Decoder logits for `inputs` (which start with BOS), one row per input.
    pub fn decode(&self, g: &mut Graph, memory: Var, inputs: &[TokenId]) -> Result<Var> {
        if inputs.len() > self.config.max_len {
            return Err(HearError::SequenceTooLong { len: inputs.len(), max: self.config.max_len });
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(HearError::IndexOutOfRange { index: bad, len: self.vocab.len() });
        }
        let segs = vec![SEG_ANSWER; inputs.len()];
        let mut x = self.embed_tokens(g, inputs, &segs, 0);
        x = self.layout.dec_in_norm.forward(g, x);
        let mask = g.constant(causal_mask(inputs.len()));
        for layer in &self.layout.decoder {
            x = layer.forward(g, x, memory, mask);
        }
        let x = self.layout.dec_norm.forward(g, x);
        Ok(self.layout.out.forward(g, x))
    }

    /// Teacher-forced logits predicting every token of `target`.
    pub fn forward_logits(
        &self,
        g: &mut Graph,
        fused: Var,
        instance: &DialogueInstance,
        target: &[TokenId],
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(HearError::InvalidArgument("target sequence is empty".into()));
        }
        let memory = self.encode(g, fused, instance)?;
        let inputs: Vec<TokenId> = std::iter::once(BOS).chain(target[..target.len() - 1].iter().copied()).collect();
        self.decode(g, memory, &inputs)
    }

    /// Mean next-token cross-entropy of the answer (followed by EOS).
    pub fn answer_loss(&self, g: &mut Graph, fused: Var, instance: &DialogueInstance) -> Result<Var> {
        let target = answer_target(&instance.answer);
        let logits = self.forward_logits(g, fused, instance, &target)?;
        Ok(g.cross_entropy(logits, &target))
    }

    /// Reconstructed audio rows for the frame indices `masked`, in that order.
    pub fn reconstruct(&self, g: &mut Graph, memory: Var, frames: usize, masked: &[usize]) -> Result<Var> {
        if masked.is_empty() {
            return Err(HearError::InvalidArgument("no masked indices".into()));
        }
        if let Some(&bad) = masked.iter().find(|&&m| m >= frames) {
            return Err(HearError::IndexOutOfRange { index: bad, len: frames });
        }
        let rows = g.select_rows(memory, masked);
        let h = self.layout.recon_hidden.forward(g, rows);
        let h = g.gelu(h);
        Ok(self.layout.recon_out.forward(g, h))
    }

    // Value-level conveniences.

    /// `[u || v] W` for a track.
    pub fn embed_av(&self, track: &FeatureTrack) -> Result<Tensor> {
        self.fused_value(track, Fusion::Plain)
    }

    pub fn fused_value(&self, track: &FeatureTrack, fusion: Fusion) -> Result<Tensor> {
        let mut g = Graph::new(self.params.tensors());
        let v = self.fuse(&mut g, track, fusion)?;
        Ok(g.value(v).clone())
    }

    /// Teacher-forced logits for a precomputed fused sequence.
    pub fn dlm_forward(&self, fused: &Tensor, instance: &DialogueInstance, target: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new(self.params.tensors());
        let f = g.constant(fused.clone());
        let logits = self.forward_logits(&mut g, f, instance, target)?;
        Ok(g.value(logits).clone())
    }

    /// Encoder states for a precomputed fused sequence.
    pub fn encoder_states(&self, fused: &Tensor, instance: &DialogueInstance) -> Result<Tensor> {
        let mut g = Graph::new(self.params.tensors());
        let f = g.constant(fused.clone());
        let m = self.encode(&mut g, f, instance)?;
        Ok(g.value(m).clone())
    }

    /// Reconstruction head applied to precomputed encoder states.
    pub fn reconstruct_audio(&self, encoder_states: &Tensor, frames: usize, masked: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(self.params.tensors());
        let m = g.constant(encoder_states.clone());
        let r = self.reconstruct(&mut g, m, frames, masked)?;
        Ok(g.value(r).clone())
    }

    /// Log-probabilities of the next answer token after `prefix` (without BOS).
    pub fn next_log_probs(&self, memory: &Tensor, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new(self.params.tensors());
        let m = g.constant(memory.clone());
        let inputs: Vec<TokenId> = std::iter::once(BOS).chain(prefix.iter().copied()).collect();
        let logits = self.decode(&mut g, m, &inputs)?;
        let lv = g.value(logits);
        Ok(log_softmax(lv.row(lv.nrows() - 1)))
    }

    pub fn checkpoint(&self, extra: serde_json::Value) -> DlmCheckpoint {
        DlmCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.to_named(),
            extra,
        }
    }

    pub fn from_checkpoint(ckpt: &DlmCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(HearError::Checkpoint(format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version)));
        }
        let mut model = Self::new(ckpt.config.clone(), ckpt.vocab.clone())?;
        model.params.load_named(&ckpt.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        fs::write(path, serde_json::to_vec(&self.checkpoint(extra))?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: DlmCheckpoint = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_checkpoint(&ckpt)
    }
}

pub const CHECKPOINT_FORMAT: &str = "hear-dlm";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Version-tagged model archive: config echo, vocabulary and named tensors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DlmCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: DlmConfig,
    pub vocab: Vocabulary,
    pub params: Vec<NamedTensor>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Decoder target for an answer: its tokens followed by EOS.
pub fn answer_target(answer: &[TokenId]) -> Vec<TokenId> {
    answer.iter().copied().chain(std::iter::once(EOS)).collect()
}

/// Mean over positions of `-log softmax(logits_t)[target_t]`.
pub fn dlm_loss(logits: &Tensor, target: &[TokenId]) -> f64 {
    assert_eq!(logits.nrows(), target.len(), "one logit row per target token");
    let total: f64 = target.iter().enumerate().map(|(t, &y)| -log_softmax_at(logits.row(t), y)).sum();
    total / target.len().max(1) as f64
}

/// Concatenates audio and video column blocks, `[u || v]`.
pub fn concat_av(audio: &Tensor, video: &Tensor) -> Tensor {
    concatenate(Axis(1), &[audio.view(), video.view()]).expect("row counts agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn tiny() -> (DlmModel, DialogueInstance, FeatureTrack) {
        let vocab = Vocabulary::build(["what do you hear ? i hear music . a man cooks"], &[]);
        let cfg = DlmConfig {
            width: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_hidden: 16,
            recon_hidden: 8,
            max_len: 40,
            video_dim: 3,
            audio_dim: 2,
            seed: 1,
        };
        let model = DlmModel::new(cfg, vocab.clone()).unwrap();
        let inst = DialogueInstance::from_rounds(
            "c",
            vocab.encode("a man cooks"),
            &[(vocab.encode("what do you hear ?"), vocab.encode("music"))],
            vocab.encode("what do you hear ?"),
            vocab.encode("i hear music"),
            3,
        );
        let track = FeatureTrack::new(
            Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin()),
            Array2::from_shape_fn((5, 2), |(i, j)| ((i * 2 + j) as f64 * 0.91).cos()),
        )
        .unwrap();
        (model, inst, track)
    }

    #[test]
    fn embed_av_is_block_linear() {
        let (model, _, track) = tiny();
        let zero_v = FeatureTrack::new(Array2::zeros(track.video.raw_dim()), track.audio.clone()).unwrap();
        let zero_u = FeatureTrack::new(track.video.clone(), Array2::zeros(track.audio.raw_dim())).unwrap();
        let both = model.embed_av(&track).unwrap();
        let sum = model.embed_av(&zero_v).unwrap() + model.embed_av(&zero_u).unwrap();
        for (a, b) in both.iter().zip(sum.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zeros = FeatureTrack::new(Array2::zeros((5, 3)), Array2::zeros((5, 2))).unwrap();
        assert!(model.embed_av(&zeros).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_av_matches_direct_matrix_product() {
        let (model, _, track) = tiny();
        let w = model.params.get("av_proj").unwrap();
        let doubled = FeatureTrack::new(track.video.clone(), &track.audio * 2.0).unwrap();
        let audio_only = FeatureTrack::new(Array2::zeros(track.video.raw_dim()), track.audio.clone()).unwrap();
        let lhs = model.embed_av(&doubled).unwrap() - model.embed_av(&track).unwrap();
        let oracle = concat_av(&track.audio, &Array2::zeros(track.video.raw_dim())).dot(w);
        for ((a, b), c) in lhs.iter().zip(oracle.iter()).zip(model.embed_av(&audio_only).unwrap().iter()) {
            assert!((a - b).abs() < 1e-12 && (b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_shape_and_determinism() {
        let (model, inst, track) = tiny();
        let fused = model.embed_av(&track).unwrap();
        let a = model.dlm_forward(&fused, &inst, &[5]).unwrap();
        assert_eq!(a.dim(), (1, model.vocab_size()));
        let b = model.dlm_forward(&fused, &inst, &[5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decoder_is_causal() {
        let (model, inst, track) = tiny();
        let fused = model.embed_av(&track).unwrap();
        let target = answer_target(&inst.answer);
        let base = model.dlm_forward(&fused, &inst, &target).unwrap();
        // Token at position t (0-based) is decoder input t + 1.
        for t in 0..target.len() - 1 {
            let mut changed = target.clone();
            changed[t] = (changed[t] + 1) % model.vocab_size();
            let out = model.dlm_forward(&fused, &inst, &changed).unwrap();
            for row in 0..target.len() {
                let same = base.row(row) == out.row(row);
                if row <= t {
                    assert!(same, "row {row} changed after perturbing token {t}");
                } else {
                    assert!(!same, "row {row} ignored token {t}");
                }
            }
        }
    }

    #[test]
    fn sequence_too_long_is_rejected() {
        let (model, mut inst, track) = tiny();
        inst.question = vec![6; 60];
        let fused = model.embed_av(&track).unwrap();
        assert!(matches!(model.dlm_forward(&fused, &inst, &[5]), Err(HearError::SequenceTooLong { .. })));
    }

    #[test]
    fn loss_hand_values() {
        let v = 4;
        assert!((dlm_loss(&Array2::zeros((3, v)), &[0, 1, 2]) - (v as f64).ln()).abs() < 1e-12);
        let l = dlm_loss(&array![[2.0, 0.0, 0.0, 0.0]], &[0]);
        let expected = -(2f64.exp() / (2f64.exp() + 3.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.34076).abs() < 1e-5);
        assert!(dlm_loss(&array![[60.0, 0.0, 0.0]], &[0]) < 1e-20);
    }

    #[test]
    fn reconstruction_rows_follow_mask_order() {
        let (model, inst, track) = tiny();
        let fused = model.embed_av(&track).unwrap();
        let states = model.encoder_states(&fused, &inst).unwrap();
        let one = model.reconstruct_audio(&states, 5, &[3]).unwrap();
        assert_eq!(one.dim(), (1, 2));
        let ab = model.reconstruct_audio(&states, 5, &[1, 4]).unwrap();
        let ba = model.reconstruct_audio(&states, 5, &[4, 1]).unwrap();
        assert_eq!(ab.row(0), ba.row(1));
        assert_eq!(ab.row(1), ba.row(0));
        assert!(model.reconstruct_audio(&states, 5, &[5]).is_err());
    }

    #[test]
    fn zero_head_reconstructs_zero() {
        let (mut model, inst, track) = tiny();
        for id in model.recon_head_ids() {
            model.params.tensors_mut()[id].fill(0.0);
        }
        let fused = model.embed_av(&track).unwrap();
        let states = model.encoder_states(&fused, &inst).unwrap();
        assert!(model.reconstruct_audio(&states, 5, &[0, 2]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, inst, track) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path, serde_json::json!({"note": 1})).unwrap();
        let back = DlmModel::load(&path).unwrap();
        let fused = model.embed_av(&track).unwrap();
        assert_eq!(model.dlm_forward(&fused, &inst, &[5, 6]).unwrap(), back.dlm_forward(&fused, &inst, &[5, 6]).unwrap());
    }
}
