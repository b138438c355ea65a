//! Adagrad with optional non-negativity projection.

use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f32 = 0.05;
pub const DEFAULT_EPS: f32 = 1e-10;

/// `G += g^2; w -= lr * g / (sqrt(G) + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adagrad {
    pub lr: f32,
    pub eps: f32,
    /// Accumulated squared gradients, one per parameter.
    pub accum: Vec<Tensor>,
    /// Parameters clamped to `>= 0` after every step.
    pub nonneg: Vec<ParamId>,
}

impl Adagrad {
    pub fn new(store: &ParamStore, lr: f32, eps: f32) -> Self {
        Self {
            lr,
            eps,
            accum: store.iter().map(|(_, _, v)| Tensor::zeros(v.shape())).collect(),
            nonneg: Vec::new(),
        }
    }

    pub fn project_nonneg(mut self, id: ParamId) -> Self {
        self.nonneg.push(id);
        self
    }

    /// `grads[i]` belongs to `ParamId(i)`; `None` leaves the parameter untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let acc = self.accum[i].data_mut();
            let w = store.get_mut(ParamId(i)).data_mut();
            for ((w, a), &g) in w.iter_mut().zip(acc.iter_mut()).zip(g.data()) {
                *a += g * g;
                *w -= self.lr * g / (libm::sqrtf(*a) + self.eps);
            }
        }
        for &id in &self.nonneg {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let a = store.insert("a".into(), Tensor::from_vec(&[3], alloc::vec![1.0, 1.0, 0.01]));
        let mut opt = Adagrad::new(&store, 0.05, 1e-10).project_nonneg(a);
        opt.step(&mut store, &[Some(Tensor::from_vec(&[3], alloc::vec![2.0, -0.5, 3.0]))]);
        let v = store.get(a).data();
        assert!((v[0] - 0.95).abs() < 1e-6);
        assert!((v[1] - 1.05).abs() < 1e-6);
        assert_eq!(v[2], 0.0);
        // second identical gradient: step lr/sqrt(2)
        opt.step(&mut store, &[Some(Tensor::from_vec(&[3], alloc::vec![2.0, 0.0, 0.0]))]);
        assert!((store.get(a).data()[0] - (0.95 - 0.05 * 2.0 / 8f32.sqrt())).abs() < 1e-6);
    }
}
