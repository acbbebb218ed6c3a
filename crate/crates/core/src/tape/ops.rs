use log::warn;

use super::kernels::{self, WindowLayout};
use super::{accumulate, Mode, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::params::StatUpdate;
use crate::rng;
use crate::scalar::{c, Scalar};
use crate::tensor::{gemm, Tensor};

/// Additive bias applied to masked logits before exponentiation.
pub const MASK_FILL: f64 = -1e9;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    use Op::*;
    match op {
        Leaf => vec![],
        MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
        Scale(x, _)
        | Shift(x)
        | Exp(x)
        | Log(x)
        | Relu(x)
        | Gelu(x)
        | Clamp(x, _, _)
        | Softmax(x)
        | Dropout(x, _)
        | Transpose(x)
        | Reshape(x)
        | SliceRows(x, _)
        | SliceCols(x, _)
        | SumAll(x)
        | MeanAll(x)
        | RowSum(x)
        | Gather(x, _) => vec![*x],
        LayerNorm { x, gamma, beta, .. } | BatchNorm { x, gamma, beta, .. } => {
            vec![*x, *gamma, *beta]
        }
        ConcatRows(xs) | ConcatCols(xs) => xs.clone(),
        WindowAttention { q, k, v, .. } => vec![*q, *k, *v],
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let k: T = c(GELU_K);
    let u = k * (x + c::<T>(GELU_A) * x * x * x);
    c::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k: T = c(GELU_K);
    let a: T = c(GELU_A);
    let t = (k * (x + a * x * x * x)).tanh();
    let half: T = c(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + c::<T>(3.0) * a * x * x)
}

impl<T: Scalar> Tape<T> {
    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    /// `x[r, :] + bias` for every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.numel() != xv.cols() {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let cols = xv.cols();
        let b = bv.data();
        let mut value = xv.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b[i % cols];
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, rg, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.unary(x, value, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.unary(x, value, Op::Shift(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.unary(x, value, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        self.unary(x, value, Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.unary(x, value, Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.unary(x, value, Op::Gelu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        self.unary(x, value, Op::Clamp(x, lo, hi))
    }

    /// Row-wise softmax over the last axis. Masked entries (`false`) get an
    /// additive [`MASK_FILL`] and come out as exactly zero; a row with
    /// every entry masked is emitted as zeros and counted as a warning.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(Error::shape("softmax_rows mask", xv.shape(), &[m.len()]));
            }
        }
        let cols = xv.cols();
        let mut value = xv.clone();
        let mut dead = 0u64;
        for (r, row) in value.data_mut().chunks_exact_mut(cols).enumerate() {
            let keep = mask.map(|m| &m[r * cols..(r + 1) * cols]);
            if !softmax_in_place(row, keep) {
                dead += 1;
            }
        }
        if dead > 0 {
            warn!("softmax_rows: {dead} fully masked row(s) set to zero");
            self.masked_rows += dead;
        }
        Ok(self.unary(x, value, Op::Softmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nf = T::from_usize(n).unwrap();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Batch normalization over the rows of an `N×n` input.
    ///
    /// Train mode normalizes with (biased) batch statistics and queues a
    /// running-stat update `r ← m·r + (1−m)·batch` for the caller to apply;
    /// eval mode normalizes with the given running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor<T>, &Tensor<T>),
        stat_ids: Option<(crate::params::ParamId, crate::params::ParamId)>,
        momentum: T,
        eps: T,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (rows, n) = (xv.rows(), xv.cols());
        if self.value(gamma).numel() != n
            || self.value(beta).numel() != n
            || running.0.numel() != n
            || running.1.numel() != n
        {
            return Err(Error::shape("batch_norm", xv.shape(), self.shape(gamma)));
        }
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            if rows < 2 {
                return Err(Error::BatchTooSmall(rows));
            }
            let rf = T::from_usize(rows).unwrap();
            let mut mean = vec![T::zero(); n];
            for row in xv.data().chunks_exact(n) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rf);
            let mut var = vec![T::zero(); n];
            for row in xv.data().chunks_exact(n) {
                for j in 0..n {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= rf);
            if let Some((mid, vid)) = stat_ids {
                let keep = momentum;
                let blend = T::one() - momentum;
                let unbias = rf / (rf - T::one());
                let new_mean: Vec<T> = running
                    .0
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| keep * r + blend * b)
                    .collect();
                let new_var: Vec<T> = running
                    .1
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| keep * r + blend * b * unbias)
                    .collect();
                self.stat_updates.push(StatUpdate {
                    mean: mid,
                    var: vid,
                    new_mean: Tensor::from_vec(&[n], new_mean),
                    new_var: Tensor::from_vec(&[n], new_var),
                });
            }
            (mean, var)
        } else {
            (running.0.data().to_vec(), running.1.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(n) {
            for j in 0..n {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng::uniform(&mut self.rng) < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut value = self.value(x).clone();
        for (v, &m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        Ok(self.unary(x, value, Op::Dropout(x, mask)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.unary(x, value, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    /// Rows `[start, start+len)` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start + len > xv.rows() || len == 0 {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let cols = xv.cols();
        let value = Tensor::from_vec(&[len, cols], xv.data()[start * cols..(start + len) * cols].to_vec());
        Ok(self.unary(x, value, Op::SliceRows(x, start)))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self
            .value(*xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let v = self.value(x);
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(Error::shape("concat_rows", &[rows, cols], v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor::from_vec(&[rows, cols], data), rg, Op::ConcatRows(xs.to_vec())))
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if xv.shape().len() != 2 || start + len > cols || len == 0 {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let data = xv
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::from_vec(&[xv.rows(), len], data);
        Ok(self.unary(x, value, Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self
            .value(*xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .rows();
        let mut total = 0;
        for &x in xs {
            let v = self.value(x);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::shape("concat_cols", &[rows, total], v.shape()));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor::from_vec(&[rows, total], data), rg, Op::ConcatCols(xs.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.unary(x, value, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / T::from_usize(v.numel()).unwrap());
        self.unary(x, value, Op::MeanAll(x))
    }

    /// `[r×c] → [r×1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v
            .data()
            .chunks_exact(v.cols())
            .map(|r| r.iter().copied().sum())
            .collect();
        let value = Tensor::from_vec(&[v.rows(), 1], data);
        self.unary(x, value, Op::RowSum(x))
    }

    /// Picks column `idx[r]` of every row: `[r×c] → [r×1]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let cols = v.cols();
        if idx.len() != v.rows() || idx.iter().any(|&i| i >= cols) {
            return Err(Error::shape("gather", v.shape(), &[idx.len()]));
        }
        let data = idx.iter().enumerate().map(|(r, &i)| v.data()[r * cols + i]).collect();
        let value = Tensor::from_vec(&[idx.len(), 1], data);
        Ok(self.unary(x, value, Op::Gather(x, idx.to_vec())))
    }

    /// Multi-head scaled dot-product attention inside sliding windows.
    ///
    /// `q`, `k`, `v` are `H×η` projections. Window `j` covers source rows
    /// `[jλ, jλ+W)`; rows past `H` are zero padding. A key takes part iff it
    /// is inside the source and `key_mask` marks it true. The result is
    /// `(k·W)×η`, window after window. Probabilities are recomputed during
    /// backward, so only one `W×W` score block is live at a time.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, layout: WindowLayout, key_mask: &[bool]) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() != 2 {
            return Err(Error::shape("window_attention", qv.shape(), kv.shape()));
        }
        let (h, eta) = (qv.rows(), qv.cols());
        if key_mask.len() != h {
            return Err(Error::shape("window_attention mask", qv.shape(), &[key_mask.len()]));
        }
        layout.validate(eta)?;
        let (out, dead) = kernels::window_attention_forward(layout, h, eta, qv.data(), kv.data(), vv.data(), key_mask);
        if dead > 0 {
            log::debug!("window_attention: {dead} query row(s) had no visible key");
            self.masked_rows += dead;
        }
        let value = Tensor::from_vec(&[layout.count(h) * layout.window, eta], out);
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            value,
            rg,
            Op::WindowAttention {
                q,
                k,
                v,
                layout,
                key_mask: key_mask.to_vec(),
            },
        ))
    }

    pub(super) fn backprop(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, kk, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(a) {
                    let mut ga = vec![T::zero(); m * kk];
                    gemm(m, n, kk, g.data(), false, bv.data(), true, &mut ga, T::zero());
                    accumulate(grads, *a, Tensor::from_vec(&[m, kk], ga));
                }
                if wants(b) {
                    let mut gb = vec![T::zero(); kk * n];
                    gemm(kk, m, n, av.data(), true, g.data(), false, &mut gb, T::zero());
                    accumulate(grads, *b, Tensor::from_vec(&[kk, n], gb));
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if wants(b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
                if wants(a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.zip_map(val(b), |x, y| x * y).unwrap());
                }
                if wants(b) {
                    accumulate(grads, *b, g.zip_map(val(a), |x, y| x * y).unwrap());
                }
            }
            Op::AddRow(x, bias) => {
                if wants(bias) {
                    let cols = g.cols();
                    let mut gb = vec![T::zero(); cols];
                    for row in g.data().chunks_exact(cols) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *bias, Tensor::from_vec(val(bias).shape(), gb));
                }
                if wants(x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Shift(x) => accumulate(grads, *x, g),
            Op::Exp(x) => {
                accumulate(grads, *x, g.zip_map(&node.value, |a, y| a * y).unwrap());
            }
            Op::Log(x) => {
                accumulate(grads, *x, g.zip_map(val(x), |a, v| a / v).unwrap());
            }
            Op::Relu(x) => {
                let z = T::zero();
                accumulate(grads, *x, g.zip_map(val(x), |a, v| if v > z { a } else { z }).unwrap());
            }
            Op::Gelu(x) => {
                accumulate(grads, *x, g.zip_map(val(x), |a, v| a * gelu_grad(v)).unwrap());
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let z = T::zero();
                accumulate(
                    grads,
                    *x,
                    g.zip_map(val(x), |a, v| if v >= lo && v <= hi { a } else { z })
                        .unwrap(),
                );
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_exact_mut(cols).zip(y.data().chunks_exact(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (a, &b) in gr.iter_mut().zip(yr) {
                        *a = b * (*a - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let gam = val(gamma).data();
                if wants(gamma) || wants(beta) {
                    let mut gg = vec![T::zero(); n];
                    let mut gbeta = vec![T::zero(); n];
                    for (gr, hr) in g.data().chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                            gbeta[j] += gr[j];
                        }
                    }
                    if wants(gamma) {
                        accumulate(grads, *gamma, Tensor::from_vec(val(gamma).shape(), gg));
                    }
                    if wants(beta) {
                        accumulate(grads, *beta, Tensor::from_vec(val(beta).shape(), gbeta));
                    }
                }
                if wants(x) {
                    let nf = T::from_usize(n).unwrap();
                    let mut gx = Vec::with_capacity(g.numel());
                    for ((gr, hr), &inv) in g.data().chunks_exact(n).zip(xhat.chunks_exact(n)).zip(inv_std) {
                        let dh: Vec<T> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let s1: T = dh.iter().copied().sum();
                        let s2: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gx.push(inv / nf * (nf * dh[j] - s1 - hr[j] * s2));
                        }
                    }
                    accumulate(grads, *x, Tensor::from_vec(g.shape(), gx));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let n = g.cols();
                let rows = g.rows();
                let gam = val(gamma).data();
                let mut gg = vec![T::zero(); n];
                let mut gbeta = vec![T::zero(); n];
                for (gr, hr) in g.data().chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        gg[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                }
                if wants(x) {
                    let mut gx = vec![T::zero(); g.numel()];
                    if *batch_stats {
                        let rf = T::from_usize(rows).unwrap();
                        for (r, gr) in g.data().chunks_exact(n).enumerate() {
                            for j in 0..n {
                                let dh = gr[j] * gam[j];
                                let s1 = gbeta[j] * gam[j];
                                let s2 = gg[j] * gam[j];
                                gx[r * n + j] = inv_std[j] / rf * (rf * dh - s1 - xhat[r * n + j] * s2);
                            }
                        }
                    } else {
                        for (r, gr) in g.data().chunks_exact(n).enumerate() {
                            for j in 0..n {
                                gx[r * n + j] = gr[j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::from_vec(g.shape(), gx));
                }
                if wants(gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec(val(gamma).shape(), gg));
                }
                if wants(beta) {
                    accumulate(grads, *beta, Tensor::from_vec(val(beta).shape(), gbeta));
                }
            }
            Op::Dropout(x, mask) => {
                let mut gx = g;
                for (a, &m) in gx.data_mut().iter_mut().zip(mask) {
                    *a *= m;
                }
                accumulate(grads, *x, gx);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose().unwrap()),
            Op::Reshape(x) => {
                let shape = val(x).shape().to_vec();
                accumulate(grads, *x, g.reshape(&shape).unwrap());
            }
            Op::SliceRows(x, start) => {
                let xv = val(x);
                let cols = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                gx.data_mut()[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                accumulate(grads, *x, gx);
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for x in xs {
                    let n = val(x).numel();
                    if wants(x) {
                        let part = g.data()[off..off + n].to_vec();
                        accumulate(grads, *x, Tensor::from_vec(val(x).shape(), part));
                    }
                    off += n;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = val(x);
                let (cols, len) = (xv.cols(), g.cols());
                let mut gx = Tensor::zeros(xv.shape());
                for (r, gr) in g.data().chunks_exact(len).enumerate() {
                    gx.data_mut()[r * cols + start..r * cols + start + len].copy_from_slice(gr);
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatCols(xs) => {
                let total = g.cols();
                let mut off = 0;
                for x in xs {
                    let w = val(x).cols();
                    if wants(x) {
                        let part = g
                            .data()
                            .chunks_exact(total)
                            .flat_map(|row| row[off..off + w].iter().copied())
                            .collect();
                        accumulate(grads, *x, Tensor::from_vec(val(x).shape(), part));
                    }
                    off += w;
                }
            }
            Op::SumAll(x) => {
                accumulate(grads, *x, Tensor::full(val(x).shape(), g.item()));
            }
            Op::MeanAll(x) => {
                let n = T::from_usize(val(x).numel()).unwrap();
                accumulate(grads, *x, Tensor::full(val(x).shape(), g.item() / n));
            }
            Op::RowSum(x) => {
                let xv = val(x);
                let cols = xv.cols();
                let gx = Tensor::from_fn(xv.shape(), |i| g.data()[i / cols]);
                accumulate(grads, *x, gx);
            }
            Op::Gather(x, idx) => {
                let xv = val(x);
                let cols = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for (r, &j) in idx.iter().enumerate() {
                    gx.data_mut()[r * cols + j] = g.data()[r];
                }
                accumulate(grads, *x, gx);
            }
            Op::WindowAttention {
                q,
                k,
                v,
                layout,
                key_mask,
            } => {
                let qv = val(q);
                let (h, eta) = (qv.rows(), qv.cols());
                let (dq, dk, dv) = kernels::window_attention_backward(
                    *layout,
                    h,
                    eta,
                    qv.data(),
                    val(k).data(),
                    val(v).data(),
                    key_mask,
                    g.data(),
                );
                let shape = qv.shape().to_vec();
                if wants(q) {
                    accumulate(grads, *q, Tensor::from_vec(&shape, dq));
                }
                if wants(k) {
                    accumulate(grads, *k, Tensor::from_vec(&shape, dk));
                }
                if wants(v) {
                    accumulate(grads, *v, Tensor::from_vec(&shape, dv));
                }
            }
        }
    }
}

/// Stable masked softmax of one row. Returns false when every entry was
/// masked; the row is then zeroed.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], keep: Option<&[bool]>) -> bool {
    let fill: T = c(MASK_FILL);
    if let Some(keep) = keep {
        if !keep.iter().any(|&k| k) {
            row.iter_mut().for_each(|v| *v = T::zero());
            return false;
        }
        for (v, &k) in row.iter_mut().zip(keep) {
            if !k {
                *v += fill;
            }
        }
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    true
}
