//! AdamW with decoupled weight decay and per-tensor learning rates.

use crate::model::{ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

/// Optimizer state; moments exist only for trainable tensors.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub hp: AdamWParams,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(hp: AdamWParams, params: &ParamStore<T>, trainable: &[bool]) -> Self {
        let state = params
            .tensors
            .iter()
            .zip(trainable)
            .map(|(t, &on)| {
                on.then(|| Moments {
                    m: vec![T::zero(); t.data.len()],
                    v: vec![T::zero(); t.data.len()],
                    step: 0,
                })
            })
            .collect();
        Self { hp, state }
    }

    pub fn has_state(&self, tensor: usize) -> bool {
        self.state[tensor].is_some()
    }

    pub fn steps(&self, tensor: usize) -> Option<u64> {
        self.state[tensor].as_ref().map(|s| s.step)
    }

    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + λθ)` for every tensor with state, using `lrs[tensor]`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lrs: &[f64]) {
        let b1 = T::from_f64(self.hp.beta1);
        let b2 = T::from_f64(self.hp.beta2);
        let one = T::one();
        let eps = T::from_f64(self.hp.eps);
        for (i, st) in self.state.iter_mut().enumerate() {
            let Some(st) = st else { continue };
            st.step += 1;
            let bc1 = T::from_f64(1.0 - self.hp.beta1.powi(st.step as i32));
            let bc2 = T::from_f64(1.0 - self.hp.beta2.powi(st.step as i32));
            let lr = T::from_f64(lrs[i]);
            let wd = T::from_f64(self.hp.weight_decay);
            let g = grads.get(i);
            let p = params.get_mut(i);
            for j in 0..p.len() {
                st.m[j] = b1 * st.m[j] + (one - b1) * g[j];
                st.v[j] = b2 * st.v[j] + (one - b2) * g[j] * g[j];
                let mhat = st.m[j] / bc1;
                let vhat = st.v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p[j]);
            }
        }
    }
}
