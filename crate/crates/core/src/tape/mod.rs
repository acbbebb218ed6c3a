//! Reverse-mode differentiation over a linear tape.
//!
//! Every forward op appends one node holding its output value and whatever
//! it needs for the backward sweep. Nodes only reference earlier nodes, so
//! the tape is topologically ordered by construction and [`Tape::backward`]
//! visits each record exactly once, last to first.
//!
//! Parameters live outside the tape in a [`ParamStore`]; a forward pass binds
//! the ones it touches as leaves with [`Tape::bind`] and reads their
//! gradients back out with [`Tape::param_grads`].

mod kernels;
mod ops;

pub use kernels::WindowLayout;
pub(crate) use ops::softmax_in_place;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, StatUpdate};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout(Var, Vec<T>),
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    Gather(Var, Vec<usize>),
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        layout: WindowLayout,
        key_mask: Vec<bool>,
    },
}

pub(crate) struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Named tally of attention-score scalars materialized during a forward.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct ScoreLedger {
    entries: Vec<(String, u64)>,
}

impl ScoreLedger {
    pub fn record(&mut self, label: impl Into<String>, scalars: u64) {
        self.entries.push((label.into(), scalars));
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|(_, n)| n).sum()
    }

    /// Largest single attention call.
    pub fn peak(&self) -> u64 {
        self.entries.iter().map(|(_, n)| *n).max().unwrap_or(0)
    }

    pub fn total_for(&self, label: &str) -> u64 {
        self.entries.iter().filter(|(l, _)| l == label).map(|(_, n)| n).sum()
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    bound: HashMap<ParamId, Var>,
    mode: Mode,
    rng: Rng,
    scores: ScoreLedger,
    stat_updates: Vec<StatUpdate<T>>,
    masked_rows: u64,
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self::with_rng(mode, rng::seeded(seed))
    }

    pub fn with_rng(mode: Mode, rng: Rng) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            mode,
            rng,
            scores: ScoreLedger::default(),
            stat_updates: Vec::new(),
            masked_rows: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn scores(&self) -> &ScoreLedger {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut ScoreLedger {
        &mut self.scores
    }

    /// Softmax rows that had every entry masked and were emitted as zeros.
    pub fn masked_row_warnings(&self) -> u64 {
        self.masked_rows
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter, created once per tape.
    pub fn bind(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.leaf(entry.value.clone(), entry.trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward sweep; zeros when the leaf was not
    /// reached or does not require grad.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(v).shape()),
        }
    }

    /// Gradients for every trainable parameter of `store`, in store order.
    /// Parameters this tape never bound get zeros.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| match self.bound.get(&id) {
                Some(&v) => self.grad(v),
                None => Tensor::zeros(store.entry(id).value.shape()),
            })
            .collect()
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.backprop(i, g, &mut grads);
            }
        }
        // only leaves keep their gradient
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert!(matches!(op, Op::Leaf) || ops::inputs(&op).iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}
