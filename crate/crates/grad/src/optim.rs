//! First-order optimizers over a [`ParamStore`].

use crate::graph::Gradients;
use crate::nn::{Bound, ParamKind, ParamStore};

/// Stochastic gradient descent with optional momentum and weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) {
        if self.velocity.len() != store.len() {
            self.velocity = vec![None; store.len()];
        }
        for (i, p) in store.entries_mut().iter_mut().enumerate() {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let Some(g) = grads.data(bound.vars[i]) else { continue };
            let w = p.tensor.data_mut();
            if self.momentum == 0.0 && self.weight_decay == 0.0 {
                for (w, g) in w.iter_mut().zip(g) {
                    *w -= self.lr * g;
                }
                continue;
            }
            let vel = self.velocity[i].get_or_insert_with(|| vec![0.0; w.len()]);
            for ((w, g), v) in w.iter_mut().zip(g).zip(vel.iter_mut()) {
                let d = g + self.weight_decay * *w;
                *v = self.momentum * *v + d;
                *w -= self.lr * *v;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) {
        if self.m.len() != store.len() {
            self.m = vec![None; store.len()];
            self.v = vec![None; store.len()];
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in store.entries_mut().iter_mut().enumerate() {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let Some(g) = grads.data(bound.vars[i]) else { continue };
            let w = p.tensor.data_mut();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; w.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; w.len()]);
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                w[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
