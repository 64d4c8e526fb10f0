//! Answer generation: length-normalised beam search and greedy decoding.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::vocab::EOS;
use crate::data::{DialogueInstance, TokenId};
use crate::dlm::DlmModel;
use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    pub length_penalty: f64,
    pub eos: TokenId,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 5, max_len: 20, length_penalty: 0.3, eos: EOS }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(config_err("decode.beam", "must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(config_err("decode.max_len", "must be at least 1"));
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return Err(config_err("decode.length_penalty", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Anything that yields next-token log-probabilities for a prefix.
pub trait StepModel {
    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// A dialogue model bound to one encoded context.
pub struct DlmStepper<'a> {
    model: &'a DlmModel,
    memory: Tensor,
}

impl<'a> DlmStepper<'a> {
    pub fn new(model: &'a DlmModel, fused: &Tensor, instance: &DialogueInstance) -> Result<Self> {
        Ok(Self { model, memory: model.encoder_states(fused, instance)? })
    }
}

impl StepModel for DlmStepper<'_> {
    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.model.next_log_probs(&self.memory, prefix)
    }
}

/// A finished or truncated hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, including the final EOS when one was produced.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
}

impl Hypothesis {
    pub fn score(&self, penalty: f64) -> f64 {
        self.log_prob / (self.tokens.len().max(1) as f64).powf(penalty)
    }

    /// Tokens without the trailing EOS.
    pub fn answer(&self, eos: TokenId) -> Vec<TokenId> {
        let mut t = self.tokens.clone();
        if t.last() == Some(&eos) {
            t.pop();
        }
        t
    }
}

fn better(a: &Hypothesis, b: &Hypothesis, penalty: f64) -> bool {
    let (sa, sb) = (a.score(penalty), b.score(penalty));
    sa > sb || (sa == sb && a.tokens < b.tokens)
}

/// Beam search over a step model. Each step keeps the `beam - finished`
/// best expansions by cumulative log-probability; hypotheses ending in EOS
/// move to the finished pool. The result is the finished hypothesis with
/// the highest `log_prob / len^penalty`, ties going to the smaller token
/// sequence.
pub fn beam_search<M: StepModel + ?Sized>(model: &M, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut live = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let width = cfg.beam - finished.len();
        if width == 0 || live.is_empty() {
            break;
        }
        let mut expansions: Vec<Hypothesis> = Vec::new();
        for h in &live {
            let lp = model.next_log_probs(&h.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                expansions.push(Hypothesis { tokens, log_prob: h.log_prob + l });
            }
        }
        expansions.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens)));
        expansions.truncate(width);
        live.clear();
        for h in expansions {
            if h.tokens.last() == Some(&cfg.eos) {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
    }
    finished.extend(live);
    let mut best = finished.pop().expect("at least one hypothesis");
    for h in finished {
        if better(&h, &best, cfg.length_penalty) {
            best = h;
        }
    }
    Ok(best)
}

/// Argmax decoding (lowest token id on ties) until EOS or `max_len` tokens.
pub fn greedy_search<M: StepModel + ?Sized>(model: &M, max_len: usize, eos: TokenId) -> Result<Hypothesis> {
    let mut h = Hypothesis { tokens: Vec::new(), log_prob: 0.0 };
    for _ in 0..max_len {
        let lp = model.next_log_probs(&h.tokens)?;
        let (tok, &l) = lp
            .iter()
            .enumerate()
            .fold(None::<(usize, &f64)>, |acc, (i, l)| match acc {
                Some((_, best)) if *best >= *l => acc,
                _ => Some((i, l)),
            })
            .expect("non-empty vocabulary");
        h.tokens.push(tok);
        h.log_prob += l;
        if tok == eos {
            break;
        }
    }
    Ok(h)
}

/// Answer tokens (without EOS) for one instance and fused A/V sequence.
pub fn beam_decode(model: &DlmModel, fused: &Tensor, instance: &DialogueInstance, cfg: &DecodeConfig) -> Result<Vec<TokenId>> {
    let stepper = DlmStepper::new(model, fused, instance)?;
    Ok(beam_search(&stepper, cfg)?.answer(cfg.eos))
}

pub fn greedy_decode(model: &DlmModel, fused: &Tensor, instance: &DialogueInstance, max_len: usize) -> Result<Vec<TokenId>> {
    let stepper = DlmStepper::new(model, fused, instance)?;
    Ok(greedy_search(&stepper, max_len, EOS)?.answer(EOS))
}
