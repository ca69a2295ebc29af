//! Momentum SGD and Adam over one parameter group of a [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Real;

fn check_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay }
    }

    /// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v` for every parameter of `group`
    /// that carries a gradient.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>, group: ParamGroup, lr: f64) -> Result<()> {
        check_lr(lr)?;
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for id in store.ids_in(group) {
            let p = store.param_mut(id);
            let Some(grad) = p.value.grad.take() else { continue };
            let buf = p
                .momentum_buffer
                .get_or_insert_with(|| vec![T::zero(); grad.len()]);
            let data = p.value.data_mut();
            for ((w, v), &g) in data.iter_mut().zip(buf.iter_mut()).zip(&grad) {
                *v = mu * *v + (g + wd * *w);
                *w -= lr * *v;
            }
            p.value.grad = Some(grad);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct AdamSlot<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

/// Adam with bias correction and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    state: HashMap<ParamId, AdamSlot<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            weight_decay,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, group: ParamGroup, lr: f64) -> Result<()> {
        check_lr(lr)?;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let wd = T::lit(self.weight_decay);
        let eps = T::lit(self.eps);
        for id in store.ids_in(group) {
            let p = store.param_mut(id);
            let Some(grad) = p.value.grad.as_ref() else { continue };
            let slot = self.state.entry(id).or_insert_with(|| AdamSlot {
                m: vec![T::zero(); grad.len()],
                v: vec![T::zero(); grad.len()],
                t: 0,
            });
            slot.t += 1;
            let bc1 = T::one() - b1.powi(slot.t);
            let bc2 = T::one() - b2.powi(slot.t);
            let step = T::lit(lr) / bc1;
            let grad = grad.clone();
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = grad[i] + wd * data[i];
                slot.m[i] = b1 * slot.m[i] + (T::one() - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (T::one() - b2) * g * g;
                let denom = (slot.v[i] / bc2).sqrt() + eps;
                data[i] -= step * slot.m[i] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(w: f64, g: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .add("w", Tensor::from_vec(vec![w]).unwrap(), ParamGroup::Weights)
            .unwrap();
        s.param_mut(id).value.grad = Some(vec![g]);
        (s, id)
    }

    #[test]
    fn plain_step_moves_by_lr() {
        let (mut s, id) = store_with(1.0, 1.0);
        Sgd::new(0.0, 0.0).step(&mut s, ParamGroup::Weights, 0.1).unwrap();
        assert!((s.param(id).value.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn decay_only_step() {
        let (mut s, id) = store_with(2.0, 0.0);
        Sgd::new(0.9, 0.5).step(&mut s, ParamGroup::Weights, 0.1).unwrap();
        // v = 0.9*0 + 0.5*2 = 1, w = 2 - 0.1
        assert!((s.param(id).value.item() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let (mut s, _) = store_with(1.0, 1.0);
        assert!(Sgd::new(0.9, 0.0).step(&mut s, ParamGroup::Weights, 0.0).is_err());
        let mut adam = Adam::new(0.5, 0.999, 0.0);
        assert!(adam.step(&mut s, ParamGroup::Weights, -1.0).is_err());
    }

    #[test]
    fn other_group_is_untouched() {
        let (mut s, id) = store_with(1.0, 1.0);
        Sgd::new(0.0, 0.0).step(&mut s, ParamGroup::Arch, 0.1).unwrap();
        assert_eq!(s.param(id).value.item(), 1.0);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let (mut s, id) = store_with(1.0, 0.3);
        let mut adam = Adam::new(0.5, 0.999, 0.0);
        adam.step(&mut s, ParamGroup::Weights, 0.01).unwrap();
        // bias-corrected m/sqrt(v) = sign(g) on the first step
        assert!((s.param(id).value.item() - 0.99).abs() < 1e-6);
    }
}
