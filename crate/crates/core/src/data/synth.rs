//! Toy video-grounded dialogue corpus with known audio/visual ground truth.
//!
//! Every clip has latent visual attributes (activity, hair colour, the place
//! the person walks to, the room named in the caption) and one audio event.
//! Half of the audio events leave a visual trace (a dog is visible while it
//! barks); the rest (music, a phone ringing, silence) have no visual
//! correlate at all, so questions about them can only be answered by
//! listening.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DialogueInstance, FeatureTrack, QaPair, Vocabulary, DEFAULT_HISTORY_WINDOW};
use crate::error::{config_err, Result};
use crate::sal::KeywordSet;

const AUDIO_ONLY_EVENTS: [&str; 3] = ["music", "ringing", "silence"];
const AUDIO_VISUAL_EVENTS: [&str; 3] = ["speech", "barking", "laughter"];
const ACTIVITIES: [&str; 6] = ["cooking", "reading", "cleaning", "dancing", "eating", "typing"];
const PLACES: [&str; 4] = ["kitchen", "garden", "bedroom", "garage"];
const HAIR: [&str; 4] = ["black", "brown", "blond", "red"];

pub const MAX_EVENTS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCorpusConfig {
    pub clips: usize,
    pub frames: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    /// Number of audio event classes (and of activity classes).
    pub events: usize,
    /// Probability that a clip's audio event has no visual correlate.
    pub audio_only_fraction: f64,
    /// Dialogue rounds per clip, each drawn from a distinct question template.
    pub questions_per_clip: usize,
    /// Include questions that need both streams at once.
    pub mixed_questions: bool,
    pub noise: f64,
    pub seed: u64,
    pub history_window: usize,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            clips: 50,
            frames: 24,
            video_dim: 32,
            audio_dim: 8,
            events: 6,
            audio_only_fraction: 0.5,
            questions_per_clip: 8,
            mixed_questions: false,
            noise: 0.3,
            seed: 0,
            history_window: DEFAULT_HISTORY_WINDOW,
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("clips", self.clips),
            ("frames", self.frames),
            ("video_dim", self.video_dim),
            ("audio_dim", self.audio_dim),
            ("questions_per_clip", self.questions_per_clip),
        ] {
            if v == 0 {
                return Err(config_err(field, "must be at least 1"));
            }
        }
        if !(2..=MAX_EVENTS).contains(&self.events) {
            return Err(config_err("events", format!("must be in 2..={MAX_EVENTS}")));
        }
        if self.questions_per_clip > self.template_count() {
            return Err(config_err("questions_per_clip", format!("at most {} templates exist", self.template_count())));
        }
        if !(0.0..=1.0).contains(&self.audio_only_fraction) {
            return Err(config_err("audio_only_fraction", "must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(config_err("noise", "must be finite and non-negative"));
        }
        Ok(())
    }

    fn template_count(&self) -> usize {
        TEMPLATES.iter().filter(|t| self.mixed_questions || t.kind != QuestionKind::Mixed).count()
    }

    fn audio_only_events(&self) -> &'static [&'static str] {
        &AUDIO_ONLY_EVENTS[..self.events.div_ceil(2)]
    }

    fn audio_visual_events(&self) -> &'static [&'static str] {
        &AUDIO_VISUAL_EVENTS[..self.events / 2]
    }
}

/// Which stream a question needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Audio,
    Visual,
    Mixed,
}

/// Ground truth attached to every synthetic question.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionLabel {
    pub kind: QuestionKind,
    pub template: usize,
    /// The answer depends on an audio event with no visual correlate.
    pub audio_only_answerable: bool,
}

impl QuestionLabel {
    pub fn audio_related(&self) -> bool {
        matches!(self.kind, QuestionKind::Audio | QuestionKind::Mixed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipLatents {
    pub audio_event: String,
    pub audio_only: bool,
    pub activity: String,
    pub destination: String,
    pub hair: String,
    pub room: String,
}

#[derive(Clone, Debug)]
pub struct SynthClip {
    pub clip_id: String,
    pub caption: String,
    pub track: FeatureTrack,
    pub latents: ClipLatents,
    /// Raw question/answer text per round.
    pub rounds: Vec<(String, String)>,
    pub instances: Vec<DialogueInstance>,
    pub labels: Vec<QuestionLabel>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub vocab: Vocabulary,
    pub clips: Vec<SynthClip>,
}

impl SynthCorpus {
    pub fn instances(&self) -> impl Iterator<Item = (&SynthClip, &DialogueInstance, &QuestionLabel)> {
        self.clips.iter().flat_map(|c| c.instances.iter().zip(&c.labels).map(move |(i, l)| (c, i, l)))
    }

    pub fn num_instances(&self) -> usize {
        self.clips.iter().map(|c| c.instances.len()).sum()
    }
}

struct Template {
    kind: QuestionKind,
    questions: &'static [&'static str],
    answer: fn(&ClipLatents) -> String,
}

fn sound_phrase(event: &str) -> &'static str {
    match event {
        "music" => "music",
        "ringing" => "a phone ringing",
        "silence" => "nothing",
        "speech" => "people talking",
        "barking" => "a dog barking",
        _ => "laughter",
    }
}

const TEMPLATES: [Template; 9] = [
    Template {
        kind: QuestionKind::Audio,
        questions: &["what sound can you hear ?", "what sounds do you hear ?"],
        answer: |l| format!("i hear {}", sound_phrase(&l.audio_event)),
    },
    Template {
        kind: QuestionKind::Audio,
        questions: &["can you hear any sounds ?", "is there any sound in the video ?"],
        answer: |l| match l.audio_event.as_str() {
            "silence" => "no , it is silent".to_string(),
            e => format!("yes , i hear {}", sound_phrase(e)),
        },
    },
    Template {
        kind: QuestionKind::Audio,
        questions: &["is there any music ?", "do you hear music playing ?"],
        answer: |l| match l.audio_event.as_str() {
            "music" => "yes , there is music".to_string(),
            _ => "no , there is no music".to_string(),
        },
    },
    Template {
        kind: QuestionKind::Audio,
        questions: &["does anyone talk in the video ?", "do they speak to each other ?"],
        answer: |l| match l.audio_event.as_str() {
            "speech" => "yes , they talk".to_string(),
            _ => "no , nobody talks".to_string(),
        },
    },
    Template {
        kind: QuestionKind::Audio,
        questions: &["is the radio on ?", "is the phone busy ?"],
        answer: |l| match l.audio_event.as_str() {
            "music" | "ringing" => "yes , it is on".to_string(),
            _ => "no , it is off".to_string(),
        },
    },
    Template {
        kind: QuestionKind::Visual,
        questions: &["what is the person doing ?", "what is he doing ?"],
        answer: |l| format!("he is {}", l.activity),
    },
    Template {
        kind: QuestionKind::Visual,
        questions: &["can you tell where he goes ?", "where does he go ?"],
        answer: |l| format!("he goes to the {}", l.destination),
    },
    Template {
        kind: QuestionKind::Visual,
        questions: &["what color is his hair ?", "what is his hair color ?"],
        answer: |l| format!("his hair is {}", l.hair),
    },
    Template {
        kind: QuestionKind::Mixed,
        questions: &["what is he doing while you hear the sound ?", "what does he do and what do you hear ?"],
        answer: |l| format!("he is {} and i hear {}", l.activity, sound_phrase(&l.audio_event)),
    },
];

/// All question surface forms the generator can emit.
pub fn template_questions() -> impl Iterator<Item = (QuestionKind, &'static str)> {
    TEMPLATES.iter().flat_map(|t| t.questions.iter().map(move |q| (t.kind, *q)))
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ndarray::Array2<f64> {
    ndarray::Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn words_for_vocab() -> Vec<String> {
    let mut out: Vec<String> = template_questions().map(|(_, q)| q.to_string()).collect();
    let latents = AUDIO_ONLY_EVENTS
        .iter()
        .chain(AUDIO_VISUAL_EVENTS.iter())
        .flat_map(|a| {
            let a = a.to_string();
            ACTIVITIES.iter().map(move |act| ClipLatents {
                audio_event: a.clone(),
                audio_only: false,
                activity: act.to_string(),
                destination: PLACES[0].into(),
                hair: HAIR[0].into(),
                room: PLACES[0].into(),
            })
        })
        .collect::<Vec<_>>();
    for l in &latents {
        out.extend(TEMPLATES.iter().map(|t| (t.answer)(l)));
    }
    out.extend(PLACES.iter().chain(HAIR.iter()).map(|s| s.to_string()));
    out.push("a person is in the .".into());
    out.extend(KeywordSet::default().words().map(str::to_string));
    out
}

/// Generates the corpus. Pure function of `cfg`, seed included.
pub fn synth_corpus(cfg: &SynthCorpusConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dv, da, l) = (cfg.video_dim, cfg.audio_dim, cfg.frames);

    let activity_proto = gaussian_matrix(&mut rng, MAX_EVENTS, dv);
    let place_proto = gaussian_matrix(&mut rng, PLACES.len(), dv);
    let hair_proto = gaussian_matrix(&mut rng, HAIR.len(), dv);
    let cue_proto = gaussian_matrix(&mut rng, AUDIO_VISUAL_EVENTS.len(), dv);
    let sound_proto = gaussian_matrix(&mut rng, AUDIO_ONLY_EVENTS.len() + AUDIO_VISUAL_EVENTS.len(), da);

    let audio_only = cfg.audio_only_events();
    let audio_visual = cfg.audio_visual_events();
    let activities = &ACTIVITIES[..cfg.events];

    let mut clips = Vec::with_capacity(cfg.clips);
    for c in 0..cfg.clips {
        let is_audio_only = rng.gen_bool(cfg.audio_only_fraction);
        let audio_event = if is_audio_only {
            *audio_only.choose(&mut rng).expect("non-empty")
        } else {
            *audio_visual.choose(&mut rng).expect("events >= 2")
        };
        let act = rng.gen_range(0..activities.len());
        let dest = rng.gen_range(0..PLACES.len());
        let hair = rng.gen_range(0..HAIR.len());
        let room = rng.gen_range(0..PLACES.len());
        let latents = ClipLatents {
            audio_event: audio_event.to_string(),
            audio_only: is_audio_only,
            activity: activities[act].to_string(),
            destination: PLACES[dest].to_string(),
            hair: HAIR[hair].to_string(),
            room: PLACES[room].to_string(),
        };

        let period = rng.gen_range(6.0..12.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let sound_row = match audio_event {
            "silence" => None,
            e => {
                let idx = AUDIO_ONLY_EVENTS
                    .iter()
                    .chain(AUDIO_VISUAL_EVENTS.iter())
                    .position(|x| *x == e)
                    .expect("known event");
                Some(sound_proto.row(idx).to_owned())
            }
        };
        let cue_row = AUDIO_VISUAL_EVENTS.iter().position(|x| *x == audio_event).map(|i| cue_proto.row(i).to_owned());

        let mut video = gaussian_matrix(&mut rng, l, dv) * cfg.noise;
        let mut audio = gaussian_matrix(&mut rng, l, da) * cfg.noise;
        for t in 0..l {
            let mut vrow = video.row_mut(t);
            vrow += &activity_proto.row(act);
            vrow += &hair_proto.row(hair);
            if 2 * t >= l {
                vrow += &place_proto.row(dest);
            }
            if let Some(cue) = &cue_row {
                vrow += cue;
            }
            if let Some(snd) = &sound_row {
                let envelope = 1.0 + 0.5 * (std::f64::consts::TAU * t as f64 / period + phase).sin();
                let mut arow = audio.row_mut(t);
                arow.scaled_add(envelope, snd);
            }
        }
        let track = FeatureTrack::new(video, audio)?;

        let mut order: Vec<usize> =
            (0..TEMPLATES.len()).filter(|&i| cfg.mixed_questions || TEMPLATES[i].kind != QuestionKind::Mixed).collect();
        order.shuffle(&mut rng);
        order.truncate(cfg.questions_per_clip);
        let mut rounds = Vec::with_capacity(order.len());
        let mut labels = Vec::with_capacity(order.len());
        for &ti in &order {
            let t = &TEMPLATES[ti];
            let q = t.questions[rng.gen_range(0..t.questions.len())];
            rounds.push((q.to_string(), (t.answer)(&latents)));
            labels.push(QuestionLabel {
                kind: t.kind,
                template: ti,
                audio_only_answerable: t.kind == QuestionKind::Audio && is_audio_only,
            });
        }
        clips.push((format!("clip{c:04}"), format!("a person is in the {} .", latents.room), track, latents, rounds, labels));
    }

    let extra = words_for_vocab();
    let extra_refs: Vec<&str> = extra.iter().map(String::as_str).collect();
    let vocab = Vocabulary::build(
        clips.iter().flat_map(|c| std::iter::once(c.1.as_str()).chain(c.4.iter().flat_map(|(q, a)| [q.as_str(), a.as_str()]))),
        &extra_refs,
    );

    let clips = clips
        .into_iter()
        .map(|(clip_id, caption, track, latents, rounds, labels)| {
            let encoded: Vec<QaPair> = rounds.iter().map(|(q, a)| (vocab.encode(q), vocab.encode(a))).collect();
            let instances =
                DialogueInstance::expand_dialogue(&clip_id, &vocab.encode(&caption), &encoded, cfg.history_window);
            SynthClip { clip_id, caption, track, latents, rounds, instances, labels }
        })
        .collect();
    Ok(SynthCorpus { vocab, clips })
}
