//! Blocked attention kernel shared by windowed and full attention.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::ops::softmax_in_place;

/// Sliding-window geometry: window `j` covers source rows
/// `[j·stride, j·stride + window)`, for `j < ceil(H / stride)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub window: usize,
    pub stride: usize,
    pub heads: usize,
}

impl WindowLayout {
    pub fn new(window: usize, stride: usize, heads: usize) -> Result<Self> {
        let l = WindowLayout { window, stride, heads };
        if window == 0 || stride == 0 || heads == 0 {
            return Err(Error::invalid(format!("degenerate window layout {l:?}")));
        }
        if stride > window {
            return Err(Error::invalid(format!(
                "stride {stride} exceeds window {window}; positions would be skipped"
            )));
        }
        Ok(l)
    }

    /// One window spanning the whole sequence: ordinary attention.
    pub fn full(len: usize, heads: usize) -> Self {
        WindowLayout {
            window: len,
            stride: len,
            heads,
        }
    }

    pub(crate) fn validate(&self, eta: usize) -> Result<()> {
        WindowLayout::new(self.window, self.stride, self.heads)?;
        if !eta.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "width {eta} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn count(&self, len: usize) -> usize {
        len.div_ceil(self.stride)
    }

    pub fn start(&self, j: usize) -> usize {
        j * self.stride
    }

    /// Rows of window `j` that fall inside a source of length `len`.
    pub fn in_range(&self, j: usize, len: usize) -> usize {
        self.window.min(len - self.start(j))
    }

    /// Attention-score scalars the layout materializes for `len` rows.
    pub fn score_scalars(&self, len: usize) -> u64 {
        (self.count(len) * self.heads) as u64 * (self.window as u64).pow(2)
    }
}

/// Strided `c = alpha·a·b + beta·c` with an explicit bounds check.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Scalar>(
    (m, k, n): (usize, usize, usize),
    alpha: T,
    a: (&[T], usize, isize, isize),
    b: (&[T], usize, isize, isize),
    beta: T,
    c: (&mut [T], usize, isize),
) {
    if m == 0 || n == 0 || k == 0 {
        if beta == T::zero() && m > 0 && n > 0 {
            for i in 0..m {
                for j in 0..n {
                    c.0[c.1 + i * c.2 as usize + j] = T::zero();
                }
            }
        }
        return;
    }
    let reach =
        |off: usize, r: usize, rs: isize, cc: usize, cs: isize| off + (r - 1) * rs as usize + (cc - 1) * cs as usize;
    assert!(reach(a.1, m, a.2, k, a.3) < a.0.len());
    assert!(reach(b.1, k, b.2, n, b.3) < b.0.len());
    assert!(reach(c.1, m, c.2, n, 1) < c.0.len());
    // SAFETY: the asserts cover the furthest element each view can touch.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr().add(a.1),
            a.2,
            a.3,
            b.0.as_ptr().add(b.1),
            b.2,
            b.3,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2,
            1,
        );
    }
}

/// Fills `probs` (W×wk) for one window/head; returns rows with no key.
#[allow(clippy::too_many_arguments)]
fn window_probs<T: Scalar>(
    layout: WindowLayout,
    j: usize,
    head: usize,
    len: usize,
    eta: usize,
    q: &[T],
    k: &[T],
    keep: &[bool],
    probs: &mut [T],
) -> u64 {
    let d = eta / layout.heads;
    let s0 = layout.start(j);
    let wk = layout.in_range(j, len);
    let w = layout.window;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let off = s0 * eta + head * d;
    let probs = &mut probs[..w * wk];
    gemm_strided(
        (wk, d, wk),
        scale,
        (q, off, eta as isize, 1),
        (k, off, 1, eta as isize),
        T::zero(),
        (probs, 0, wk as isize),
    );
    // padded query rows are zero vectors: all-zero logits
    probs[wk * wk..].iter_mut().for_each(|p| *p = T::zero());
    let mut dead = 0;
    for row in probs.chunks_exact_mut(wk) {
        if !softmax_in_place(row, Some(keep)) {
            dead += 1;
        }
    }
    dead
}

pub(crate) fn window_attention_forward<T: Scalar>(
    layout: WindowLayout,
    len: usize,
    eta: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    key_mask: &[bool],
) -> (Vec<T>, u64) {
    let (w, d) = (layout.window, eta / layout.heads);
    let nwin = layout.count(len);
    let mut out = vec![T::zero(); nwin * w * eta];
    let mut probs = vec![T::zero(); w * w.min(len)];
    let mut dead = 0;
    for j in 0..nwin {
        let s0 = layout.start(j);
        let wk = layout.in_range(j, len);
        let keep = &key_mask[s0..s0 + wk];
        for head in 0..layout.heads {
            dead += window_probs(layout, j, head, len, eta, q, k, keep, &mut probs);
            gemm_strided(
                (w, wk, d),
                T::one(),
                (&probs, 0, wk as isize, 1),
                (v, s0 * eta + head * d, eta as isize, 1),
                T::zero(),
                (&mut out, j * w * eta + head * d, eta as isize),
            );
        }
    }
    (out, dead)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn window_attention_backward<T: Scalar>(
    layout: WindowLayout,
    len: usize,
    eta: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    key_mask: &[bool],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (w, d) = (layout.window, eta / layout.heads);
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut dq = vec![T::zero(); len * eta];
    let mut dk = vec![T::zero(); len * eta];
    let mut dv = vec![T::zero(); len * eta];
    let cap = w * w.min(len);
    let mut probs = vec![T::zero(); cap];
    let mut dprobs = vec![T::zero(); cap];
    for j in 0..layout.count(len) {
        let s0 = layout.start(j);
        let wk = layout.in_range(j, len);
        let keep = &key_mask[s0..s0 + wk];
        for head in 0..layout.heads {
            window_probs(layout, j, head, len, eta, q, k, keep, &mut probs);
            let src = s0 * eta + head * d;
            let go = j * w * eta + head * d;
            // dV += Pᵀ·dO
            gemm_strided(
                (wk, w, d),
                T::one(),
                (&probs, 0, 1, wk as isize),
                (grad_out, go, eta as isize, 1),
                T::one(),
                (&mut dv, src, eta as isize),
            );
            // dP = dO·Vᵀ
            gemm_strided(
                (w, d, wk),
                T::one(),
                (grad_out, go, eta as isize, 1),
                (v, src, 1, eta as isize),
                T::zero(),
                (&mut dprobs, 0, wk as isize),
            );
            // dS = P ⊙ (dP − Σ dP⊙P)
            for (pr, gr) in probs[..w * wk]
                .chunks_exact(wk)
                .zip(dprobs[..w * wk].chunks_exact_mut(wk))
            {
                let dot: T = pr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                for (g, &p) in gr.iter_mut().zip(pr) {
                    *g = p * (*g - dot);
                }
            }
            // only in-range query rows depend on the source
            gemm_strided(
                (wk, wk, d),
                scale,
                (&dprobs, 0, wk as isize, 1),
                (k, src, eta as isize, 1),
                T::one(),
                (&mut dq, src, eta as isize),
            );
            gemm_strided(
                (wk, wk, d),
                scale,
                (&dprobs, 0, 1, wk as isize),
                (q, src, eta as isize, 1),
                T::one(),
                (&mut dk, src, eta as isize),
            );
        }
    }
    (dq, dk, dv)
}
