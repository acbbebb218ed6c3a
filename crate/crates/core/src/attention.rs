//! Multi-head attention: the classical full form, the sliding-window split
//! with per-window attention, and inter-window attention.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, INIT_STD};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{softmax_in_place, Tape, Var, WindowLayout};
use crate::tensor::Tensor;

pub const SW_LABEL: &str = "sw-mha";
pub const W_LABEL: &str = "w-mha";
pub const MHA_LABEL: &str = "mha";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeKind {
    None,
    Ape,
    Tpe,
}

/// Encodings for the token level (SW) and the window level (W).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeConfig {
    pub sw: PeKind,
    pub w: PeKind,
}

impl Default for PeConfig {
    fn default() -> Self {
        PeConfig {
            sw: PeKind::Ape,
            w: PeKind::Ape,
        }
    }
}

/// Sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/dim))`, `PE[p, 2i+1] = cos(·)`.
pub fn sinusoidal<T: Scalar>(len: usize, dim: usize) -> Result<Tensor<T>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "sinusoidal encoding needs an even width, got {dim}"
        )));
    }
    Ok(Tensor::from_fn(&[len, dim], |i| {
        let (p, j) = (i / dim, i % dim);
        let angle = p as f64 / 10000f64.powf((j - j % 2) as f64 / dim as f64);
        T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// `len×dim` table for `kind`; the trainable kind returns its initial value.
pub fn positional_encoding<T: Scalar>(len: usize, dim: usize, kind: PeKind, rng: &mut Rng) -> Result<Tensor<T>> {
    match kind {
        PeKind::None => Ok(Tensor::zeros(&[len, dim])),
        PeKind::Ape => sinusoidal(len, dim),
        PeKind::Tpe => Ok(Tensor::randn(&[len, dim], INIT_STD, rng)),
    }
}

/// An encoding bound to one injection point of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositionalEncoding {
    None,
    Ape,
    /// Trainable `max_len×dim` table.
    Tpe(ParamId),
}

impl PositionalEncoding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: PeKind,
        max_len: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(match kind {
            PeKind::None => PositionalEncoding::None,
            PeKind::Ape => {
                sinusoidal::<T>(1, dim)?;
                PositionalEncoding::Ape
            }
            PeKind::Tpe => {
                let table = positional_encoding(max_len, dim, kind, rng)?;
                PositionalEncoding::Tpe(store.add(format!("{name}.tpe"), table, true))
            }
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (len, dim) = (tape.value(x).rows(), tape.value(x).cols());
        match *self {
            PositionalEncoding::None => Ok(x),
            PositionalEncoding::Ape => {
                let pe = tape.constant(sinusoidal(len, dim)?);
                tape.add(x, pe)
            }
            PositionalEncoding::Tpe(id) => {
                let table = tape.bind(store, id);
                if tape.value(table).rows() < len {
                    return Err(Error::shape("trainable encoding", tape.shape(x), tape.shape(table)));
                }
                let rows = tape.slice_rows(table, 0, len)?;
                tape.add(x, rows)
            }
        }
    }
}

/// Plain-tensor `softmax(q kᵀ / √d) v` over the unmasked keys. A query with
/// no visible key yields a zero row and a warning.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    key_mask: &[bool],
) -> Result<Tensor<T>> {
    let d = q.cols();
    let p = k.rows();
    if k.cols() != d || v.rows() != p || key_mask.len() != p {
        return Err(Error::shape("scaled_dot_attention", q.shape(), k.shape()));
    }
    let mut scores = q.matmul(&k.transpose()?)?;
    let s = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut dead = 0;
    for row in scores.data_mut().chunks_exact_mut(p) {
        row.iter_mut().for_each(|x| *x *= s);
        if !softmax_in_place(row, Some(key_mask)) {
            dead += 1;
        }
    }
    if dead > 0 {
        warn!("scaled_dot_attention: {dead} query row(s) had every key masked");
    }
    scores.matmul(v)
}

/// Projections for one attention layer; `n_heads · head_dim = η`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhaParams {
    pub n_heads: usize,
    pub head_dim: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wm: ParamId,
}

impl MhaParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        eta: usize,
        n_heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_heads == 0 || !eta.is_multiple_of(n_heads) {
            return Err(Error::invalid(format!("width {eta} not divisible by {n_heads} heads")));
        }
        let mut w = |tag: &str| store.add_weight(format!("{name}.{tag}"), &[eta, eta], rng);
        Ok(MhaParams {
            n_heads,
            head_dim: eta / n_heads,
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wm: w("wm"),
        })
    }

    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    fn check<T: Scalar>(&self, tape: &Tape<T>, x: Var, mask_len: usize) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.width() {
            return Err(Error::shape("attention input", s, &[self.width()]));
        }
        if mask_len != s[0] {
            return Err(Error::shape("attention mask", s, &[mask_len]));
        }
        Ok(())
    }

    fn project<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var, Var)> {
        let wq = tape.bind(store, self.wq);
        let wk = tape.bind(store, self.wk);
        let wv = tape.bind(store, self.wv);
        Ok((tape.matmul(x, wq)?, tape.matmul(x, wk)?, tape.matmul(x, wv)?))
    }
}

/// Classical multi-head attention built from elementary tape ops.
pub fn mha<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    p: &MhaParams,
    key_mask: &[bool],
    pe: &PositionalEncoding,
) -> Result<Var> {
    composed(tape, store, x, p, key_mask, pe, MHA_LABEL)
}

/// Inter-window attention: [`mha`] over window-summary rows.
pub fn w_mha<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    p: &MhaParams,
    window_mask: &[bool],
    pe: &PositionalEncoding,
) -> Result<Var> {
    composed(tape, store, x, p, window_mask, pe, W_LABEL)
}

fn composed<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    p: &MhaParams,
    key_mask: &[bool],
    pe: &PositionalEncoding,
    label: &str,
) -> Result<Var> {
    p.check(tape, x, key_mask.len())?;
    let h = key_mask.len();
    let x = pe.apply(tape, store, x)?;
    let (q, k, v) = p.project(tape, store, x)?;
    let mask: Vec<bool> = (0..h * h).map(|i| key_mask[i % h]).collect();
    let d = p.head_dim;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut heads = Vec::with_capacity(p.n_heads);
    for i in 0..p.n_heads {
        let qi = tape.slice_cols(q, i * d, d)?;
        let ki = tape.slice_cols(k, i * d, d)?;
        let vi = tape.slice_cols(v, i * d, d)?;
        let kt = tape.transpose(ki)?;
        let s = tape.matmul(qi, kt)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax_rows(s, Some(&mask))?;
        heads.push(tape.matmul(a, vi)?);
    }
    tape.scores_mut().record(label, (p.n_heads * h * h) as u64);
    let cat = tape.concat_cols(&heads)?;
    let wm = tape.bind(store, p.wm);
    tape.matmul(cat, wm)
}

/// Full attention through the blocked kernel: one window spanning the
/// sequence. Same result as [`mha`] but only one `H×H` head block is live
/// at a time.
pub fn mha_blocked<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    p: &MhaParams,
    key_mask: &[bool],
    pe: &PositionalEncoding,
) -> Result<Var> {
    p.check(tape, x, key_mask.len())?;
    let h = key_mask.len();
    let x = pe.apply(tape, store, x)?;
    let (q, k, v) = p.project(tape, store, x)?;
    let layout = WindowLayout::full(h, p.n_heads);
    let att = tape.window_attention(q, k, v, layout, key_mask)?;
    tape.scores_mut().record(MHA_LABEL, layout.score_scalars(h));
    let wm = tape.bind(store, p.wm);
    tape.matmul(att, wm)
}

/// Plain-tensor view of the sliding-window split.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch<T> {
    /// `k×W×η`.
    pub windows: Tensor<T>,
    /// `k·W` flags, window-major; false past the end of the source.
    pub valid: Vec<bool>,
    pub source_len: usize,
    pub stride: usize,
    pub window: usize,
}

impl<T: Scalar> WindowBatch<T> {
    pub fn count(&self) -> usize {
        self.windows.shape()[0]
    }

    /// Source row held at slot `i` of window `j`, if any.
    pub fn source_index(&self, j: usize, i: usize) -> Option<usize> {
        let p = j * self.stride + i;
        (p < self.source_len).then_some(p)
    }
}

pub fn sw_split<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<WindowBatch<T>> {
    let layout = WindowLayout::new(window, stride, 1)?;
    if x.shape().len() != 2 {
        return Err(Error::shape("sw_split", x.shape(), &[window, stride]));
    }
    let (h, eta) = (x.rows(), x.cols());
    let k = layout.count(h);
    let mut data = vec![T::zero(); k * window * eta];
    let mut valid = vec![false; k * window];
    for j in 0..k {
        let start = layout.start(j);
        let n = layout.in_range(j, h);
        data[j * window * eta..(j * window + n) * eta].copy_from_slice(&x.data()[start * eta..(start + n) * eta]);
        valid[j * window..j * window + n].iter_mut().for_each(|v| *v = true);
    }
    Ok(WindowBatch {
        windows: Tensor::from_vec(&[k, window, eta], data),
        valid,
        source_len: h,
        stride,
        window,
    })
}

/// A window is real iff it holds at least one real source row.
pub fn window_mask(seq_mask: &[bool], window: usize, stride: usize) -> Vec<bool> {
    let h = seq_mask.len();
    (0..h.div_ceil(stride))
        .map(|j| seq_mask[j * stride..(j * stride + window).min(h)].iter().any(|&m| m))
        .collect()
}

/// Split-window attention.
///
/// Masked source rows are zeroed, the encoding is added, and `q`, `k`, `v`
/// are projected once for the whole sequence. Each window then attends
/// independently over its valid, unmasked keys; the per-window output is
/// projected by `W^M` and flattened, giving `ceil(H/λ)×(W·η)`. Also returns
/// the propagated window mask.
#[allow(clippy::too_many_arguments)]
pub fn sw_mha<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    p: &MhaParams,
    window: usize,
    stride: usize,
    seq_mask: &[bool],
    pe: &PositionalEncoding,
) -> Result<(Var, Vec<bool>)> {
    p.check(tape, x, seq_mask.len())?;
    let layout = WindowLayout::new(window, stride, p.n_heads)?;
    let (h, eta) = (seq_mask.len(), p.width());
    let x = if seq_mask.iter().all(|&m| m) {
        x
    } else {
        let keep = Tensor::from_fn(&[h, eta], |i| if seq_mask[i / eta] { T::one() } else { T::zero() });
        let keep = tape.constant(keep);
        tape.mul(x, keep)?
    };
    let x = pe.apply(tape, store, x)?;
    let (q, k, v) = p.project(tape, store, x)?;
    let att = tape.window_attention(q, k, v, layout, seq_mask)?;
    tape.scores_mut().record(SW_LABEL, layout.score_scalars(h));
    let wm = tape.bind(store, p.wm);
    let out = tape.matmul(att, wm)?;
    let count = layout.count(h);
    let flat = tape.reshape(out, &[count, window * eta])?;
    Ok((flat, window_mask(seq_mask, window, stride)))
}
