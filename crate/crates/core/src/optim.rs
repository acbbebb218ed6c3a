//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<T> {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor<T> {
        &self.v[i]
    }

    /// One update of every trainable parameter; `grads` is in store order.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::invalid(format!(
                "adam: {} grads / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (i, (id, g)) in store.ids().zip(grads).enumerate() {
            if g.shape() != store.get(id).shape() || self.m[i].shape() != g.shape() {
                return Err(Error::shape("adam_step", store.get(id).shape(), g.shape()));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = T::lit(self.lr / bc1);
        let bc2s = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !store.entry(id).trainable {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1t * m[j] + ob1 * g[j];
                v[j] = b2t * v[j] + ob2 * g[j] * g[j];
                p[j] -= step * m[j] / (v[j].sqrt() / bc2s + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(v), true);
        s
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut s = store(1.5);
        let mut adam = AdamState::new(&s, 1e-4);
        adam.step(&mut s, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(s.get(ParamId(0)).item(), 1.5);
    }

    #[test]
    fn first_step_magnitude() {
        for g in [1e-3, 0.5, -7.0] {
            let mut s = store(0.0);
            let mut adam = AdamState::new(&s, 1e-4);
            adam.step(&mut s, &[Tensor::scalar(g)]).unwrap();
            let delta = s.get(ParamId(0)).item().abs();
            // closed form: α·g/(|g|+ε)
            let want = 1e-4 * g.abs() / (g.abs() + 1e-8);
            assert!((delta - want).abs() < 1e-15);
            assert!((0.99e-4..=1e-4).contains(&delta), "{delta}");
        }
    }

    #[test]
    fn two_steps_follow_scalar_recurrence() {
        let g = 0.3;
        let mut s = store(1.0);
        let mut adam = AdamState::new(&s, 1e-2);
        assert_eq!(adam.t, 0);
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=2 {
            adam.step(&mut s, &[Tensor::scalar(g)]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 1e-2 * mh / (vh.sqrt() + 1e-8);
        }
        assert_eq!(adam.t, 2);
        assert!((adam.first_moment(0).item() - m).abs() < 1e-15);
        assert!((adam.second_moment(0).item() - v).abs() < 1e-15);
        assert!((s.get(ParamId(0)).item() - p).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = store(0.0);
        let mut adam = AdamState::new(&s, 1e-4);
        assert!(adam.step(&mut s, &[Tensor::zeros(&[2])]).is_err());
    }

    use crate::params::ParamId;
}
