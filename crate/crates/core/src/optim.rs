//! AdamW, the piecewise-linear learning-rate schedule, and data-parallel
//! gradient accumulation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{config_err, Result};
use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    /// Applies one update step with learning rate `lr`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, param) in params.tensors_mut().iter_mut().enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            // Parameters untouched by this loss keep their value and moments.
            let Some(grad) = grads.get(i).and_then(Option::as_ref) else { continue };
            for (((p, &g), mj), vj) in param.iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * g;
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * g * g;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
            }
        }
    }
}

/// Learning rate decaying linearly from `start` to `end`, optionally through
/// interior breakpoints given as `(fraction of training, lr)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub breakpoints: Vec<(f64, f64)>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { start: 6.24e-5, end: 3.63e-10, breakpoints: Vec::new() }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0) {
            return Err(config_err("lr", "start and end must be positive"));
        }
        let mut prev = (0.0, self.start);
        for &(f, lr) in self.breakpoints.iter().chain(std::iter::once(&(1.0, self.end))) {
            if !(f > prev.0 && f <= 1.0) {
                return Err(config_err("lr.breakpoints", "fractions must increase within (0, 1]"));
            }
            if !(lr > 0.0 && lr <= prev.1) {
                return Err(config_err("lr.breakpoints", "rates must be positive and non-increasing"));
            }
            prev = (f, lr);
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        if total_steps == 0 {
            return self.start;
        }
        let x = (step.min(total_steps) as f64) / total_steps as f64;
        let mut prev = (0.0, self.start);
        for &(f, lr) in self.breakpoints.iter().chain(std::iter::once(&(1.0, self.end))) {
            if x <= f {
                let t = (x - prev.0) / (f - prev.0);
                return prev.1 * (1.0 - t) + lr * t;
            }
            prev = (f, lr);
        }
        self.end
    }
}

/// Runs `loss_fn` for every item in parallel and returns the mean loss and
/// the mean gradient. Reduction happens in item order, so results do not
/// depend on thread scheduling.
pub fn mean_gradients<T, F>(params: &ParamStore, items: &[T], loss_fn: F) -> Result<(f64, Vec<Option<Tensor>>)>
where
    T: Sync,
    F: Fn(&mut Graph, &T) -> Result<Var> + Sync,
{
    let (loss, grads, _) = mean_gradients_aux(params, items, |g, item| Ok((loss_fn(g, item)?, ())))?;
    Ok((loss, grads))
}

/// [`mean_gradients`] with a per-item side value returned alongside the loss.
pub fn mean_gradients_aux<T, A, F>(
    params: &ParamStore,
    items: &[T],
    loss_fn: F,
) -> Result<(f64, Vec<Option<Tensor>>, Vec<A>)>
where
    T: Sync,
    A: Send,
    F: Fn(&mut Graph, &T) -> Result<(Var, A)> + Sync,
{
    let per_item: Vec<(f64, Vec<Option<Tensor>>, A)> = items
        .par_iter()
        .map(|item| {
            let mut g = Graph::new(params.tensors());
            let (loss, aux) = loss_fn(&mut g, item)?;
            let value = g.scalar(loss);
            Ok((value, g.backward(loss).into_params(), aux))
        })
        .collect::<Result<_>>()?;
    let n = items.len().max(1) as f64;
    let mut total = 0.0;
    let mut acc: Vec<Option<Tensor>> = vec![None; params.len()];
    let mut auxes = Vec::with_capacity(per_item.len());
    for (loss, grads, aux) in per_item {
        total += loss;
        auxes.push(aux);
        for (slot, g) in acc.iter_mut().zip(grads) {
            if let Some(g) = g {
                match slot {
                    Some(s) => *s += &g,
                    None => *slot = Some(g),
                }
            }
        }
    }
    for g in acc.iter_mut().flatten() {
        *g /= n;
    }
    Ok((total / n, acc, auxes))
}
