use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numcore::{Decay, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction and decoupled weight decay.
///
/// Decay applies only to parameters registered with [`Decay::Yes`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter that carries a gradient.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.tensor.requires_grad {
                continue;
            }
            let Some(grad) = p.tensor.grad.take() else { continue };
            let wd = if p.decay == Decay::Yes { self.cfg.weight_decay } else { 0.0 };
            let mo = self.moments.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
            for (((w, g), m), v) in p.tensor.values_mut().iter_mut().zip(&grad).zip(&mut mo.m).zip(&mut mo.v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
            p.tensor.grad = Some(grad);
        }
    }
}

/// Global L2 norm over the gradients of trainable parameters.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|(_, p)| p.tensor.requires_grad)
        .filter_map(|(_, p)| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let t = &mut store.get_mut(id).tensor;
            if let (true, Some(g)) = (t.requires_grad, t.grad.as_mut()) {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}
