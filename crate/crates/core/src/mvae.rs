//! Dual-channel variational autoencoder that turns each behavior's text and
//! image embeddings into one latent token `z = [zᵀ, zᴵ]`.
//!
//! Encoders run linear → batch norm → ReLU → dropout twice, then separate
//! heads for `μ` and `log σ²`. Both decoders read the full shared `z`.

use serde::{Deserialize, Serialize};

use crate::data::StandardSequence;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Linear};
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvaeConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    /// Per-channel latent width `D`; tokens are `2D` wide.
    pub latent: usize,
    pub dropout: f64,
}

impl MvaeConfig {
    pub fn new(latent: usize) -> Self {
        MvaeConfig {
            embed_dim: crate::data::EMBED_DIM,
            hidden: 256,
            latent,
            dropout: 0.2,
        }
    }

    pub fn token_width(&self) -> usize {
        2 * self.latent
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEncoder {
    pub l1: Linear,
    pub bn1: BatchNorm,
    pub l2: Linear,
    pub bn2: BatchNorm,
    pub mu: Linear,
    pub logvar: Linear,
    pub dropout: f64,
}

impl ChannelEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &MvaeConfig, rng: &mut Rng) -> Self {
        ChannelEncoder {
            l1: Linear::new(store, &format!("{name}.l1"), cfg.embed_dim, cfg.hidden, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cfg.hidden),
            l2: Linear::new(store, &format!("{name}.l2"), cfg.hidden, cfg.hidden, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cfg.hidden),
            mu: Linear::new(store, &format!("{name}.mu"), cfg.hidden, cfg.latent, rng),
            logvar: Linear::new(store, &format!("{name}.logvar"), cfg.hidden, cfg.latent, rng),
            dropout: cfg.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDecoder {
    pub l1: Linear,
    pub l2: Linear,
}

impl ChannelDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &MvaeConfig, rng: &mut Rng) -> Self {
        ChannelDecoder {
            l1: Linear::new(store, &format!("{name}.l1"), cfg.token_width(), cfg.hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), cfg.hidden, cfg.embed_dim, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mvae {
    pub cfg: MvaeConfig,
    pub text_enc: ChannelEncoder,
    pub image_enc: ChannelEncoder,
    pub text_dec: ChannelDecoder,
    pub image_dec: ChannelDecoder,
}

impl Mvae {
    /// Registers all parameters under `prefix` (e.g. `"mvae"`).
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: MvaeConfig, rng: &mut Rng) -> Self {
        Mvae {
            text_enc: ChannelEncoder::new(store, &format!("{prefix}.text_enc"), &cfg, rng),
            image_enc: ChannelEncoder::new(store, &format!("{prefix}.image_enc"), &cfg, rng),
            text_dec: ChannelDecoder::new(store, &format!("{prefix}.text_dec"), &cfg, rng),
            image_dec: ChannelDecoder::new(store, &format!("{prefix}.image_dec"), &cfg, rng),
            cfg,
        }
    }
}

/// Row-wise latent statistics of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample<T> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
    pub eps: Tensor<T>,
    pub z: Tensor<T>,
}

/// Scalar loss nodes of one channel; `total = recon + kl`, where `recon`
/// is `½‖x̂ − x‖²` per behavior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelLoss {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvaeLosses {
    pub text: ChannelLoss,
    pub image: ChannelLoss,
}

pub struct MvaeOutput<T> {
    /// `N×2D` tokens.
    pub z: Var,
    pub losses: MvaeLosses,
    pub text: LatentSample<T>,
    pub image: LatentSample<T>,
}

/// `N×embed → (μ, log σ²)`, each `N×D`; log-variance clamped to ±10.
pub fn encode_channel<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    enc: &ChannelEncoder,
    x: Var,
) -> Result<(Var, Var)> {
    let mut h = x;
    for (lin, bn) in [(&enc.l1, &enc.bn1), (&enc.l2, &enc.bn2)] {
        h = lin.forward(tape, store, h)?;
        h = bn.forward(tape, store, h)?;
        h = tape.relu(h);
        h = tape.dropout(h, enc.dropout)?;
    }
    let mu = enc.mu.forward(tape, store, h)?;
    let lv = enc.logvar.forward(tape, store, h)?;
    let lv = tape.clamp(lv, T::lit(-LOGVAR_CLAMP), T::lit(LOGVAR_CLAMP));
    Ok((mu, lv))
}

/// `z = μ + exp(½ log σ²) ⊙ ε`. `eps` should be a constant.
pub fn reparameterize<T: Scalar>(tape: &mut Tape<T>, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(logvar, T::lit(0.5));
    let sigma = tape.exp(half);
    let noise = tape.mul(sigma, eps)?;
    tape.add(mu, noise)
}

/// Per-row `½ Σⱼ (μⱼ² + σⱼ² − 1 − log σⱼ²)` as `N×1`.
pub fn kl_term<T: Scalar>(tape: &mut Tape<T>, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, logvar)?;
    let b = tape.add_scalar(b, -T::one());
    let s = tape.row_sum(b);
    Ok(tape.scale(s, T::lit(0.5)))
}

/// `N×2D → N×embed`.
pub fn decode_channel<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    dec: &ChannelDecoder,
    z: Var,
) -> Result<Var> {
    if tape.value(z).cols() != dec.l1.fan_in {
        return Err(Error::shape("decode_channel", tape.shape(z), &[dec.l1.fan_in]));
    }
    let h = dec.l1.forward(tape, store, z)?;
    let h = tape.relu(h);
    dec.l2.forward(tape, store, h)
}

fn draw_eps<T: Scalar>(tape: &mut Tape<T>, rows: usize, d: usize) -> Tensor<T> {
    match tape.mode() {
        Mode::Eval => Tensor::zeros(&[rows, d]),
        Mode::Train => {
            let data = (0..rows * d).map(|_| rng::normal(tape.rng())).collect();
            Tensor::from_vec(&[rows, d], data)
        }
    }
}

fn channel_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, recon: Var, kl_rows: Var, weights: Var) -> Result<ChannelLoss> {
    let d = tape.sub(recon, x)?;
    let sq = tape.mul(d, d)?;
    let rows = tape.row_sum(sq);
    let half = tape.scale(rows, T::lit(0.5));
    let wr = tape.mul(half, weights)?;
    let recon = tape.sum(wr);
    let wk = tape.mul(kl_rows, weights)?;
    let kl = tape.sum(wk);
    let total = tape.add(recon, kl)?;
    Ok(ChannelLoss { total, recon, kl })
}

/// Runs both channels over `N` behaviors at once (one batch-norm batch).
///
/// `text` and `image` are `N×embed`. Eps is drawn from the tape's generator
/// in train mode and is zero in eval mode. Losses are weighted sums of the
/// per-behavior terms; `weights` (length `N`) defaults to a uniform mean.
pub fn mvae_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    m: &Mvae,
    text: Var,
    image: Var,
    weights: Option<&[T]>,
) -> Result<MvaeOutput<T>> {
    let n = tape.value(text).rows();
    if tape.shape(image) != tape.shape(text) || tape.value(text).cols() != m.cfg.embed_dim {
        return Err(Error::shape("mvae_forward", tape.shape(text), tape.shape(image)));
    }
    let w = match weights {
        Some(w) if w.len() == n => w.to_vec(),
        Some(w) => return Err(Error::shape("mvae_forward weights", tape.shape(text), &[w.len()])),
        None => vec![T::one() / T::from_usize(n).unwrap(); n],
    };
    let w = tape.constant(Tensor::from_vec(&[n, 1], w));
    let d = m.cfg.latent;

    let (mu_t, lv_t) = encode_channel(tape, store, &m.text_enc, text)?;
    let (mu_i, lv_i) = encode_channel(tape, store, &m.image_enc, image)?;
    let eps_t = draw_eps(tape, n, d);
    let eps_i = draw_eps(tape, n, d);
    let et = tape.constant(eps_t.clone());
    let ei = tape.constant(eps_i.clone());
    let z_t = reparameterize(tape, mu_t, lv_t, et)?;
    let z_i = reparameterize(tape, mu_i, lv_i, ei)?;
    let z = tape.concat_cols(&[z_t, z_i])?;

    let rec_t = decode_channel(tape, store, &m.text_dec, z)?;
    let rec_i = decode_channel(tape, store, &m.image_dec, z)?;
    let kl_t = kl_term(tape, mu_t, lv_t)?;
    let kl_i = kl_term(tape, mu_i, lv_i)?;
    let text_loss = channel_loss(tape, text, rec_t, kl_t, w)?;
    let image_loss = channel_loss(tape, image, rec_i, kl_i, w)?;

    let sample = |tape: &Tape<T>, mu, lv, eps, z| LatentSample {
        mu: tape.value(mu).clone(),
        logvar: tape.value(lv).clone(),
        eps,
        z: tape.value(z).clone(),
    };
    Ok(MvaeOutput {
        text: sample(tape, mu_t, lv_t, eps_t, z_t),
        image: sample(tape, mu_i, lv_i, eps_i, z_i),
        z,
        losses: MvaeLosses {
            text: text_loss,
            image: image_loss,
        },
    })
}

pub struct Tokens<T> {
    /// One `H×2D` stage-1 sequence per input, `H = l + 1`.
    pub s1: Vec<Var>,
    pub mask1: Vec<Vec<bool>>,
    /// Mean over sequences of each sequence's mean over real behaviors.
    pub losses: MvaeLosses,
    pub text: LatentSample<T>,
    pub image: LatentSample<T>,
}

/// Tokenizes a minibatch. Only real behaviors go through the autoencoder,
/// so padded rows are never read. Row 0 of every output is the all-zero
/// CLS token.
pub fn tokenize_batch<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    m: &Mvae,
    seqs: &[&StandardSequence<T>],
) -> Result<Tokens<T>> {
    if seqs.is_empty() {
        return Err(Error::invalid("tokenize_batch needs at least one sequence"));
    }
    let dim = m.cfg.embed_dim;
    let mut text = Vec::new();
    let mut image = Vec::new();
    let mut weights = Vec::new();
    let b = T::from_usize(seqs.len()).unwrap();
    for s in seqs {
        if s.dim() != dim {
            return Err(Error::shape("tokenize_batch", s.s.shape(), &[dim]));
        }
        let real = s.real_len();
        if real == 0 {
            return Err(Error::invalid("sequence has no real behavior"));
        }
        for i in (0..s.len()).filter(|&i| s.mask[i]) {
            text.extend_from_slice(s.text_row(i));
            image.extend_from_slice(s.image_row(i));
            weights.push(T::one() / (b * T::from_usize(real).unwrap()));
        }
    }
    let n = weights.len();
    let tv = tape.constant(Tensor::from_vec(&[n, dim], text));
    let iv = tape.constant(Tensor::from_vec(&[n, dim], image));
    let out = mvae_forward(tape, store, m, tv, iv, Some(&weights))?;

    let width = m.cfg.token_width();
    let mut s1 = Vec::with_capacity(seqs.len());
    let mut mask1 = Vec::with_capacity(seqs.len());
    let mut offset = 0;
    for s in seqs {
        let mut pieces = vec![tape.constant(Tensor::zeros(&[1, width]))];
        let mut i = 0;
        while i < s.len() {
            let real = s.mask[i];
            let run = s.mask[i..].iter().take_while(|&&x| x == real).count();
            if real {
                pieces.push(tape.slice_rows(out.z, offset, run)?);
                offset += run;
            } else {
                pieces.push(tape.constant(Tensor::zeros(&[run, width])));
            }
            i += run;
        }
        s1.push(tape.concat_rows(&pieces)?);
        let mut mk = vec![true];
        mk.extend_from_slice(&s.mask);
        mask1.push(mk);
    }
    Ok(Tokens {
        s1,
        mask1,
        losses: out.losses,
        text: out.text,
        image: out.image,
    })
}

pub fn tokenize_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    m: &Mvae,
    seq: &StandardSequence<T>,
) -> Result<(Var, Vec<bool>, MvaeLosses)> {
    let mut t = tokenize_batch(tape, store, m, &[seq])?;
    Ok((t.s1.remove(0), t.mask1.remove(0), t.losses))
}
