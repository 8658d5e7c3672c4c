//! Adam and the plateau learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Moment buffers for every entry of a [`ParamStore`]; buffers of
/// non-trainable entries stay empty.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |e: &crate::params::ParamEntry| {
            if e.trainable {
                vec![0.0; e.tensor.numel()]
            } else {
                Vec::new()
            }
        };
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
        }
    }
}

/// One Adam update on a flat parameter given its gradient and moments.
/// `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies the gradients accumulated in `store` and advances the step.
/// Entries without a gradient are treated as having a zero gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    for e in store.entries() {
        if let Some(g) = &e.tensor.grad {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in {} at index {i}",
                    e.name
                )));
            }
        }
    }
    state.step += 1;
    for (i, e) in store.entries_mut().iter_mut().enumerate() {
        if !e.trainable {
            continue;
        }
        let n = e.tensor.numel();
        let g = e.tensor.grad.take().unwrap_or_else(|| vec![0.0; n]);
        adam_update(
            e.tensor.data_mut(),
            &g,
            &mut state.m[i],
            &mut state.v[i],
            state.step,
            lr,
            state.beta1,
            state.beta2,
            state.eps,
        );
        e.tensor.grad = Some(g);
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs that fail to beat the best RSum seen before them.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records an epoch's validation RSum and returns the next learning rate.
    pub fn observe(&mut self, rsum: f64, lr: f64) -> f64 {
        if self.best.is_none_or(|b| rsum > b) {
            self.best = Some(rsum);
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

/// Learning rate in effect after each epoch of `history`.
pub fn lr_trace(history: &[f64], lr0: f64, patience: usize, factor: f64) -> Vec<f64> {
    let mut sched = PlateauScheduler::new(patience, factor);
    let mut lr = lr0;
    history
        .iter()
        .map(|&r| {
            lr = sched.observe(r, lr);
            lr
        })
        .collect()
}
