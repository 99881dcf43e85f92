//! First-order optimizers over a subset of a [`ParamStore`].

use crate::param::{ParamId, ParamStore};

pub const OPTIMIZER_EPS: f64 = 1e-8;

pub trait Optimizer {
    /// Applies one update from the accumulated gradients.
    fn step(&mut self, store: &mut ParamStore);
}

#[derive(Debug, Clone)]
pub struct Sgd {
    ids: Vec<ParamId>,
    lr: f64,
}

impl Sgd {
    pub fn new(ids: Vec<ParamId>, lr: f64) -> Self {
        Sgd { ids, lr }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) {
        for &id in &self.ids {
            let p = store.get_mut(id);
            for (w, g) in p.tensor.data_mut().iter_mut().zip(p.grad.data()) {
                *w -= self.lr * g;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    ids: Vec<ParamId>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| vec![0.0; store.get(id).tensor.len()])
            .collect();
        Adam {
            ids,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &g)) in p.tensor.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.lr * mh / (vh.sqrt() + OPTIMIZER_EPS);
            }
        }
    }
}

/// Uncentered RMSProp without momentum.
#[derive(Debug, Clone)]
pub struct RmsProp {
    ids: Vec<ParamId>,
    lr: f64,
    alpha: f64,
    sq: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, lr: f64) -> Self {
        let sq = ids
            .iter()
            .map(|&id| vec![0.0; store.get(id).tensor.len()])
            .collect();
        RmsProp {
            ids,
            lr,
            alpha: 0.99,
            sq,
        }
    }
}

impl Optimizer for RmsProp {
    fn step(&mut self, store: &mut ParamStore) {
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id);
            let sq = &mut self.sq[k];
            for (i, (w, &g)) in p.tensor.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                sq[i] = self.alpha * sq[i] + (1.0 - self.alpha) * g * g;
                *w -= self.lr * g / (sq[i].sqrt() + OPTIMIZER_EPS);
            }
        }
    }
}
