use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore};
use crate::error::{numeric, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

/// First-order optimizer over the trainable tensors of one store.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr, 0.0)
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::AdamW, lr, weight_decay)
    }

    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay: T::lit(weight_decay),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update with the gradients of `store` found in `grads`.
    /// Frozen tensors are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if !grads.all_finite() {
            return Err(numeric("optimizer_step", "non-finite gradient"));
        }
        let ids: Vec<ParamId> = store.ids().collect();
        if self.m.len() != ids.len() {
            self.m = ids.iter().map(|&id| vec![T::zero(); store.get(id).len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.step);
        let bc2 = one - self.beta2.powi(self.step);
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.param(store, id).map(|g| g.to_vec()) else { continue };
            let i = id.index();
            let vals = store.get_mut(id).values_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, gi) in vals.iter_mut().zip(&g) {
                        *p -= self.lr * *gi;
                    }
                }
                OptimizerKind::AdamW => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..vals.len() {
                        m[j] = self.beta1 * m[j] + (one - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (one - self.beta2) * g[j] * g[j];
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        vals[j] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * vals[j]);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales the gradients of `store` so their global norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Gradients<T>, store: &ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads.norm_for(store).as_f64();
    if norm > max_norm && norm > 0.0 {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}
