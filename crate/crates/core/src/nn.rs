//! Named parameter storage and the transformer building blocks shared by the
//! dialogue model and the question estimator.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{HearError, Result};

/// Flat list of named tensors. Layers refer to entries by index.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Serialized form of one tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    /// Symmetric uniform initialisation scaled by `fan_in`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Array2::from_shape_fn(shape, |_| rng.gen_range(-bound..bound));
        self.add(name, t)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
                data: t.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrites every parameter from `named`; names and shapes must match exactly.
    pub fn load_named(&mut self, named: &[NamedTensor]) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(HearError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for nt in named {
            let id = self
                .id(&nt.name)
                .ok_or_else(|| HearError::Checkpoint(format!("unknown tensor {}", nt.name)))?;
            let t = Array2::from_shape_vec((nt.shape[0], nt.shape[1]), nt.data.clone())
                .map_err(|e| HearError::Checkpoint(format!("{}: {e}", nt.name)))?;
            if t.dim() != self.tensors[id].dim() {
                return Err(HearError::Checkpoint(format!(
                    "{}: shape {:?} does not match model {:?}",
                    nt.name,
                    t.dim(),
                    self.tensors[id].dim()
                )));
            }
            self.tensors[id] = t;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), (input, output), input, rng);
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, output)));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, width)));
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, width)));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads >= 1 && width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, rng),
            heads,
            width,
        }
    }

    /// `mask`, when given, is added to the `q×k` score matrix of every head.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, mask: Option<Var>) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, keys);
        let v = self.value.forward(g, keys);
        let head_dim = self.width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, lo, hi), g.slice_cols(k, lo, hi), g.slice_cols(v, lo, hi))
            };
            let scores = g.matmul_bt(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let weights = g.softmax(scores);
            outs.push(g.matmul(weights, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, joined)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm bidirectional self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: Attention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), width),
            attn: Attention::new(store, &format!("{name}.attn"), width, heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.norm_attn.forward(g, x);
        let a = self.attn.forward(g, h, h, None);
        let x = g.add(x, a);
        let h = self.norm_ff.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention, feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_cross: LayerNorm,
    pub cross_attn: Attention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), width),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), width, heads, rng),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), width),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), width, heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, causal: Var) -> Var {
        let h = self.norm_self.forward(g, x);
        let a = self.self_attn.forward(g, h, h, Some(causal));
        let x = g.add(x, a);
        let h = self.norm_cross.forward(g, x);
        let c = self.cross_attn.forward(g, h, memory, None);
        let x = g.add(x, c);
        let h = self.norm_ff.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }
}

/// Additive mask that blocks attention to later positions.
pub fn causal_mask(len: usize) -> Tensor {
    Array2::from_shape_fn((len, len), |(i, j)| if j > i { -1e30 } else { 0.0 })
}
