//! Parameterized layers bound to a [`ParamStore`].

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let w = store.add_weight(format!("{name}.w"), &[fan_in, fan_out], rng);
        let b = store.add_zeros(format!("{name}.b"), &[fan_out]);
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.bind(store, self.w);
        let b = tape.bind(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add_ones(format!("{name}.gamma"), &[width]),
            beta: store.add_zeros(format!("{name}.beta"), &[width]),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.bind(store, self.gamma);
        let b = tape.bind(store, self.beta);
        tape.layer_norm(x, g, b, T::lit(LN_EPS))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gamma = store.add_ones(format!("{name}.gamma"), &[width]);
        let beta = store.add_zeros(format!("{name}.beta"), &[width]);
        let running_mean = store.add(format!("{name}.running_mean"), crate::Tensor::zeros(&[width]), false);
        let running_var = store.add(
            format!("{name}.running_var"),
            crate::Tensor::full(&[width], T::one()),
            false,
        );
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.bind(store, self.gamma);
        let b = tape.bind(store, self.beta);
        tape.batch_norm(
            x,
            g,
            b,
            (store.get(self.running_mean), store.get(self.running_var)),
            Some((self.running_mean, self.running_var)),
            T::lit(BN_MOMENTUM),
            T::lit(BN_EPS),
        )
    }
}
