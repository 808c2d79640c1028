//! Optimizers over the parameter store.
//!
//! SGD with momentum and coupled weight decay drives network weights;
//! Adam (bias-corrected) drives architecture scalars. Both are fully
//! deterministic given identical inputs.

use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use std::collections::HashMap;

/// g = grad + wd * w;  buf = momentum * buf + g;  w -= lr * buf.
pub struct Sgd<S: Scalar> {
    pub lr: S,
    pub momentum: S,
    pub weight_decay: S,
    buffers: HashMap<ParamId, Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr: S::from_f64(lr),
            momentum: S::from_f64(momentum),
            weight_decay: S::from_f64(weight_decay),
            buffers: HashMap::new(),
        }
    }

    /// Update every `Weight` parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>) {
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Weight)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            self.step_param(store, id);
        }
    }

    pub fn step_param(&mut self, store: &mut ParamStore<S>, id: ParamId) {
        let n = store.value(id).numel();
        let buf = self
            .buffers
            .entry(id)
            .or_insert_with(|| vec![S::ZERO; n]);
        let (lr, mom, wd) = (self.lr, self.momentum, self.weight_decay);
        // Split borrows: grad read + value write live in the same Param.
        let grad = store.grad(id).to_vec();
        let value = store.value_mut(id).data_mut();
        for i in 0..n {
            let g = grad[i] + wd * value[i];
            buf[i] = mom * buf[i] + g;
            value[i] -= lr * buf[i];
        }
    }
}

/// Adam with bias correction and no weight decay.
pub struct Adam<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    t: u32,
    m: HashMap<ParamId, Vec<S>>,
    v: HashMap<ParamId, Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr: S::from_f64(lr),
            beta1: S::from_f64(beta1),
            beta2: S::from_f64(beta2),
            eps: S::from_f64(eps),
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Update every `Alpha` parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>) {
        self.t += 1;
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Alpha)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            self.update(store, id);
        }
    }

    /// Step a caller-chosen parameter set (used by tests on plain weights).
    pub fn step_params(&mut self, store: &mut ParamStore<S>, ids: &[ParamId]) {
        self.t += 1;
        for &id in ids {
            self.update(store, id);
        }
    }

    fn update(&mut self, store: &mut ParamStore<S>, id: ParamId) {
        let n = store.value(id).numel();
        let m = self.m.entry(id).or_insert_with(|| vec![S::ZERO; n]);
        let v = self.v.entry(id).or_insert_with(|| vec![S::ZERO; n]);
        let (b1, b2) = (self.beta1, self.beta2);
        let t = self.t as i32;
        let bc1 = S::ONE - pow(b1, t);
        let bc2 = S::ONE - pow(b2, t);
        let grad = store.grad(id).to_vec();
        let value = store.value_mut(id).data_mut();
        for i in 0..n {
            let g = grad[i];
            m[i] = b1 * m[i] + (S::ONE - b1) * g;
            v[i] = b2 * v[i] + (S::ONE - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn pow<S: Scalar>(base: S, exp: i32) -> S {
    let mut acc = S::ONE;
    for _ in 0..exp {
        acc *= base;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_param(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::Weight, Tensor::scalar(value));
        (store, id)
    }

    #[test]
    fn sgd_quadratic_step() {
        // loss = w^2, grad = 2w; lr 0.1: 1 -> 0.8
        let (mut store, id) = single_param(1.0);
        store.accumulate_grad(id, &[2.0]);
        let mut sgd = Sgd::new(0.1, 0.0, 0.0);
        sgd.step(&mut store);
        assert!((store.value(id).data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_decay_only_shrinks_geometrically() {
        let (mut store, id) = single_param(1.0);
        let mut sgd = Sgd::new(0.1, 0.0, 1e-4);
        let factor = 1.0 - 0.1 * 1e-4;
        let mut expected = 1.0;
        for _ in 0..5 {
            store.zero_grads();
            sgd.step(&mut store);
            expected *= factor;
            assert!((store.value(id).data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        // Constant grad 1, momentum 0.9: steps lr*(1), lr*(1.9), ...
        let (mut store, id) = single_param(0.0);
        let mut sgd = Sgd::new(0.1, 0.9, 0.0);
        store.accumulate_grad(id, &[1.0]);
        sgd.step(&mut store);
        assert!((store.value(id).data()[0] + 0.1).abs() < 1e-15);
        store.zero_grads();
        store.accumulate_grad(id, &[1.0]);
        sgd.step(&mut store);
        assert!((store.value(id).data()[0] + 0.1 + 0.19).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // Bias correction makes |step 1| = lr regardless of gradient scale.
        for &g in &[3.7, -120.0, 1.0, 2.5e4] {
            let (mut store, id) = single_param(5.0);
            let mut adam = Adam::new(0.1, 0.5, 0.999, 1e-8);
            store.accumulate_grad(id, &[g]);
            adam.step_params(&mut store, &[id]);
            let step = 5.0 - store.value(id).data()[0];
            assert!(
                (step.abs() - 0.1).abs() < 1e-9,
                "step {step} for grad {g}"
            );
            assert_eq!(step.signum(), g.signum());
        }
    }
}
