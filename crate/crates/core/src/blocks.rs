//! Split-window and inter-window transformer blocks, the two windowed
//! stages, and the assembled classifier.

use serde::{Deserialize, Serialize};

use crate::attention::{sw_mha, w_mha, MhaParams, PositionalEncoding};
use crate::config::ModelConfig;
use crate::data::StandardSequence;
use crate::error::{Error, Result};
use crate::mvae::{tokenize_batch, Mvae, MvaeLosses};
use crate::nn::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::training::Head;

/// Flattened window `W·η → 4η → 2η`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwMlp {
    pub l1: Linear,
    pub l2: Linear,
    pub dropout: f64,
}

impl SwMlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        window: usize,
        eta: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Self {
        SwMlp {
            l1: Linear::new(store, &format!("{name}.l1"), window * eta, 4 * eta, rng),
            l2: Linear::new(store, &format!("{name}.l2"), 4 * eta, 2 * eta, rng),
            dropout,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.l1.fan_in {
            return Err(Error::shape("sw_mlp", tape.shape(x), &[self.l1.fan_in]));
        }
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, self.dropout)?;
        self.l2.forward(tape, store, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwBlock {
    pub window: usize,
    pub stride: usize,
    pub ln1: LayerNorm,
    pub att: MhaParams,
    pub pe: PositionalEncoding,
    pub ln2: LayerNorm,
    pub mlp: SwMlp,
}

/// Shapes seen by one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShapes {
    pub input: [usize; 2],
    pub post_sw: [usize; 2],
    pub post_mlp: [usize; 2],
    pub output: [usize; 2],
}

impl SwBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        eta: usize,
        window: usize,
        stride: usize,
        cfg: &ModelConfig,
        max_len: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(SwBlock {
            window,
            stride,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), eta),
            att: MhaParams::new(store, &format!("{name}.att"), eta, cfg.n_heads, rng)?,
            pe: PositionalEncoding::new(store, &format!("{name}.pe"), cfg.pe.sw, max_len, eta, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), window * eta),
            mlp: SwMlp::new(store, &format!("{name}.mlp"), window, eta, cfg.dropout, rng),
        })
    }

    /// `LN → SW-MHA → LN → SW-MLP`, with no residual path. Returns `ξ`, the
    /// propagated window mask and the post-attention shape.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: &[bool],
    ) -> Result<(Var, Vec<bool>, [usize; 2])> {
        let h = self.ln1.forward(tape, store, x)?;
        let (a, wmask) = sw_mha(tape, store, h, &self.att, self.window, self.stride, mask, &self.pe)?;
        let post_sw = [tape.shape(a)[0], tape.shape(a)[1]];
        let a = self.ln2.forward(tape, store, a)?;
        Ok((self.mlp.forward(tape, store, a)?, wmask, post_sw))
    }
}

/// Pre-norm residual block: `ξ̂ = ξ + W-MHA(LN ξ)`, `out = ξ̂ + MLP(LN ξ̂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WBlock {
    pub ln1: LayerNorm,
    pub att: MhaParams,
    pub pe: PositionalEncoding,
    pub ln2: LayerNorm,
    pub l1: Linear,
    pub l2: Linear,
}

impl WBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        eta: usize,
        cfg: &ModelConfig,
        pe: Option<(crate::attention::PeKind, usize)>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let att = MhaParams::new(store, &format!("{name}.att"), eta, cfg.n_heads, rng)?;
        let pe = match pe {
            Some((kind, max_len)) => PositionalEncoding::new(store, &format!("{name}.pe"), kind, max_len, eta, rng)?,
            None => PositionalEncoding::None,
        };
        Ok(WBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), eta),
            att,
            pe,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), eta),
            l1: Linear::new(store, &format!("{name}.mlp.l1"), eta, 2 * eta, rng),
            l2: Linear::new(store, &format!("{name}.mlp.l2"), 2 * eta, eta, rng),
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mask: &[bool]) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let a = w_mha(tape, store, h, &self.att, mask, &self.pe)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.l1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.l2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub sw: SwBlock,
    pub w: Vec<WBlock>,
}

impl Stage {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        index: usize,
        eta: usize,
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let sc = cfg.stages[index];
        let in_rows = if index == 0 { cfg.tokens() } else { cfg.stage_rows()[0] };
        let out_rows = cfg.stage_rows()[index];
        let sw = SwBlock::new(
            store,
            &format!("{name}.sw"),
            eta,
            sc.window,
            sc.stride,
            cfg,
            in_rows,
            rng,
        )?;
        let w = (0..sc.w_blocks)
            .map(|b| {
                let pe = (b == 0).then_some((cfg.pe.w, out_rows));
                WBlock::new(store, &format!("{name}.w{b}"), 2 * eta, cfg, pe, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Stage { sw, w })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: &[bool],
    ) -> Result<(Var, Vec<bool>, StageShapes)> {
        let input = [tape.shape(x)[0], tape.shape(x)[1]];
        let (mut h, wmask, post_sw) = self.sw.forward(tape, store, x, mask)?;
        let post_mlp = [tape.shape(h)[0], tape.shape(h)[1]];
        for b in &self.w {
            h = b.forward(tape, store, h, &wmask)?;
        }
        let output = [tape.shape(h)[0], tape.shape(h)[1]];
        Ok((
            h,
            wmask,
            StageShapes {
                input,
                post_sw,
                post_mlp,
                output,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stages: Vec<StageShapes>,
    pub cls_width: usize,
}

impl StageTrace {
    /// `[S₁, stage-2 output, stage-3 output]`.
    pub fn pipeline(&self) -> Vec<[usize; 2]> {
        let mut p = vec![self.stages[0].input];
        p.extend(self.stages.iter().map(|s| s.output));
        p
    }

    /// The trace a forward pass produces, derived from the configuration.
    pub fn for_config(cfg: &ModelConfig) -> StageTrace {
        let d = cfg.latent;
        let rows = cfg.stage_rows();
        let mut stages = Vec::new();
        let mut input = [cfg.tokens(), 2 * d];
        for (i, s) in cfg.stages.iter().enumerate() {
            let eta = input[1];
            let output = [rows[i], 2 * eta];
            stages.push(StageShapes {
                input,
                post_sw: [rows[i], s.window * eta],
                post_mlp: output,
                output,
            });
            input = output;
        }
        StageTrace {
            stages,
            cls_width: input[1],
        }
    }
}

pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub mvae: Mvae,
    pub stages: [Stage; 2],
    pub head: Head,
}

/// Output of a batched forward pass.
pub struct Forward {
    /// `N×2` pre-softmax scores.
    pub logits: Var,
    pub mvae: MvaeLosses,
    pub traces: Vec<StageTrace>,
}

pub const SECTIONS: [&str; 4] = ["mvae", "stage2", "stage3", "head"];

impl<T: Scalar> Model<T> {
    /// Builds every layer with Glorot-uniform weights and zero biases.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::derive(seed, 1);
        let mut params = ParamStore::new();
        let d = cfg.latent;
        let mvae = Mvae::new(&mut params, "mvae", cfg.mvae(), &mut r);
        let s2 = Stage::new(&mut params, "stage2", 0, 2 * d, &cfg, &mut r)?;
        let s3 = Stage::new(&mut params, "stage3", 1, 4 * d, &cfg, &mut r)?;
        let head = Head::new(&mut params, "head", cfg.cls_width(), cfg.dropout, &mut r);
        Ok(Model {
            cfg,
            params,
            mvae,
            stages: [s2, s3],
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Tokenizes the batch, runs both stages per sequence, and classifies
    /// every sequence's CLS row.
    pub fn forward(&self, tape: &mut Tape<T>, seqs: &[&StandardSequence<T>]) -> Result<Forward> {
        self.forward_with(&self.params, tape, seqs)
    }

    /// [`Model::forward`] reading parameter values from `params`, which must
    /// share this model's layout.
    pub fn forward_with(
        &self,
        params: &ParamStore<T>,
        tape: &mut Tape<T>,
        seqs: &[&StandardSequence<T>],
    ) -> Result<Forward> {
        for s in seqs {
            if s.len() != self.cfg.seq_len {
                return Err(Error::invalid(format!(
                    "sequence length {} does not match configured l = {}",
                    s.len(),
                    self.cfg.seq_len
                )));
            }
        }
        let tokens = tokenize_batch(tape, params, &self.mvae, seqs)?;
        let mut cls = Vec::with_capacity(seqs.len());
        let mut traces = Vec::with_capacity(seqs.len());
        for (x, mask) in tokens.s1.iter().zip(&tokens.mask1) {
            let (h, m, s2) = self.stages[0].forward(tape, params, *x, mask)?;
            let (h, _, s3) = self.stages[1].forward(tape, params, h, &m)?;
            cls.push(tape.slice_rows(h, 0, 1)?);
            traces.push(StageTrace {
                stages: vec![s2, s3],
                cls_width: tape.shape(h)[1],
            });
        }
        let cls = tape.concat_rows(&cls)?;
        let logits = self.head.forward(tape, params, cls)?;
        Ok(Forward {
            logits,
            mvae: tokens.losses,
            traces,
        })
    }
}

/// Single-sequence forward: `(logits 1×2, MVAE losses, trace)`.
pub fn model_forward<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    seq: &StandardSequence<T>,
) -> Result<(Var, MvaeLosses, StageTrace)> {
    let mut f = model.forward(tape, &[seq])?;
    Ok((f.logits, f.mvae, f.traces.remove(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::data::Label;
    use crate::gradcheck;
    use crate::tape::Mode;
    use crate::tensor::Tensor;

    fn tiny_cfg() -> ModelConfig {
        let mut c = ModelConfig::custom(8, 8, [(4, 2, 1), (2, 2, 1)]).unwrap();
        c.latent = 2;
        c.n_heads = 2;
        c.embed_dim = 6;
        c.mvae_hidden = 4;
        c.dropout = 0.0;
        c.validate().unwrap();
        c
    }

    fn seq(l: usize, real: usize, dim: usize, seed: u64) -> StandardSequence<f64> {
        let mut r = rng::seeded(seed);
        let mut s = Tensor::randn(&[l, 2, dim], 1.0, &mut r);
        for i in real..l {
            s.data_mut()[i * 2 * dim..(i + 1) * 2 * dim]
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        StandardSequence {
            s,
            mask: (0..l).map(|i| i < real).collect(),
            label: Label::Spammer,
        }
    }

    fn zero_weights(store: &mut ParamStore<f64>, ids: &[crate::params::ParamId]) {
        for &id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn sw_mlp_widths() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::seeded(0);
        let mlp = SwMlp::new(&mut store, "m", 64, 32, 0.0, &mut r);
        let mut t = Tape::new(Mode::Eval, 0);
        let x = t.constant(Tensor::randn(&[513, 2048], 1.0, &mut r));
        let y = mlp.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.shape(y), &[513, 64]);
        let bad = t.constant(Tensor::zeros(&[2, 7]));
        assert!(mlp.forward(&mut t, &store, bad).is_err());

        zero_weights(&mut store, &[mlp.l1.w, mlp.l2.w]);
        let mut t = Tape::new(Mode::Eval, 0);
        let x = t.constant(Tensor::randn(&[3, 2048], 1.0, &mut r));
        let y = mlp.forward(&mut t, &store, x).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sw_mlp_hand_product() {
        // W=2, η=1: 2 → 4 → 2
        let mut store = ParamStore::<f64>::new();
        let mlp = SwMlp::new(&mut store, "m", 2, 1, 0.0, &mut rng::seeded(0));
        *store.get_mut(mlp.l1.w) = Tensor::from_vec(&[2, 4], vec![1.0, 0.0, -1.0, 0.5, 2.0, 1.0, 0.0, -0.5]);
        *store.get_mut(mlp.l2.w) = Tensor::from_vec(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        *store.get_mut(mlp.l2.b) = Tensor::from_vec(&[2], vec![0.1, -0.1]);
        let x = [0.5, -1.0];
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
        let w1 = store.get(mlp.l1.w).data().to_vec();
        let w2 = store.get(mlp.l2.w).data().to_vec();
        let h: Vec<f64> = (0..4).map(|j| gelu(x[0] * w1[j] + x[1] * w1[4 + j])).collect();
        let want: Vec<f64> = (0..2)
            .map(|o| store.get(mlp.l2.b).data()[o] + (0..4).map(|j| h[j] * w2[j * 2 + o]).sum::<f64>())
            .collect();
        let mut t = Tape::new(Mode::Eval, 0);
        let xv = t.constant(Tensor::from_vec(&[1, 2], x.to_vec()));
        let y = mlp.forward(&mut t, &store, xv).unwrap();
        for (got, want) in t.value(y).data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sw_block_shape_law() {
        let mut cfg = ModelConfig::custom(32, 128, [(64, 4, 1), (8, 2, 1)]).unwrap();
        cfg.dropout = 0.0;
        let mut store = ParamStore::<f32>::new();
        let mut r = rng::seeded(0);
        let b = SwBlock::new(&mut store, "sw", 64, 64, 4, &cfg, 129, &mut r).unwrap();
        let mut t = Tape::new(Mode::Eval, 0);
        let x = t.constant(Tensor::randn(&[129, 64], 1.0, &mut r));
        let (y, m, post) = b.forward(&mut t, &store, x, &[true; 129]).unwrap();
        assert_eq!(t.shape(y), &[33, 128]);
        assert_eq!(post, [33, 64 * 64]);
        assert_eq!(m.len(), 33);
    }

    #[test]
    fn zeroed_residual_branches_are_identity() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::seeded(3);
        let b = WBlock::new(
            &mut store,
            "w",
            8,
            &cfg,
            Some((crate::attention::PeKind::Ape, 5)),
            &mut r,
        )
        .unwrap();
        zero_weights(&mut store, &[b.att.wm, b.l2.w]);
        let mut t = Tape::new(Mode::Eval, 0);
        let xv = Tensor::randn(&[5, 8], 1.0, &mut r);
        let x = t.constant(xv.clone());
        let y = b.forward(&mut t, &store, x, &[true, true, false, true, true]).unwrap();
        assert_eq!(t.value(y), &xv);
    }

    #[test]
    fn w_block_gradients() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::seeded(4);
        let b = WBlock::new(
            &mut store,
            "w",
            8,
            &cfg,
            Some((crate::attention::PeKind::Tpe, 5)),
            &mut r,
        )
        .unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let s = store.get(id).shape().to_vec();
            if store.entry(id).name.ends_with(".w") {
                *store.get_mut(id) = Tensor::randn(&s, 0.5, &mut r);
            }
        }
        let x = Tensor::randn(&[5, 8], 1.0, &mut r);
        let cot = Tensor::randn(&[5, 8], 1.0, &mut r);
        let rep = gradcheck::check_params(&store, |s| {
            let mut t = Tape::new(Mode::Train, 0);
            let xv = t.constant(x.clone());
            let y = b.forward(&mut t, s, xv, &[true, true, false, true, true])?;
            let c = t.constant(cot.clone());
            let p = t.mul(y, c)?;
            let l = t.sum(p);
            Ok((t, l))
        })
        .unwrap();
        assert!(rep.worst() <= 1e-4, "{rep:?}");
    }

    #[test]
    fn forward_trace_matches_config() {
        let mut cfg = ModelConfig::custom(8, 20, [(4, 2, 1), (4, 3, 2)]).unwrap();
        cfg.embed_dim = 6;
        cfg.mvae_hidden = 4;
        let model = Model::<f64>::new(cfg.clone(), 0).unwrap();
        let s = seq(20, 13, 6, 1);
        let mut t = Tape::new(Mode::Eval, 0);
        let (logits, _, trace) = model_forward(&model, &mut t, &s).unwrap();
        assert_eq!(t.shape(logits), &[1, 2]);
        assert_eq!(trace, StageTrace::for_config(&cfg));
        assert_eq!(trace.pipeline(), vec![[21, 16], [11, 32], [4, 64]]);
    }

    #[test]
    fn scaled_config_pipeline() {
        let cfg = ModelConfig::custom(16, 256, [(16, 8, 3), (8, 2, 3)]).unwrap();
        assert_eq!(
            StageTrace::for_config(&cfg).pipeline(),
            vec![[257, 32], [33, 64], [17, 128]]
        );
    }

    #[test]
    fn padding_garbage_is_invisible() {
        let model = Model::<f64>::new(tiny_cfg(), 5).unwrap();
        let clean = seq(8, 3, 6, 2);
        let mut dirty = clean.clone();
        for i in 3..8 {
            dirty
                .rows_mut(i)
                .iter_mut()
                .enumerate()
                .for_each(|(j, v)| *v = 1e3 * (j as f64 - 3.0));
        }
        let run = |s: &StandardSequence<f64>| {
            let mut t = Tape::new(Mode::Eval, 0);
            let (l, _, _) = model_forward(&model, &mut t, s).unwrap();
            t.value(l).clone()
        };
        let a = run(&clean);
        assert_eq!(a, run(&clean));
        assert_eq!(a, run(&dirty));
    }

    #[test]
    fn equal_seeds_build_equal_models() {
        let a = Model::<f32>::new(tiny_cfg(), 9).unwrap();
        let b = Model::<f32>::new(tiny_cfg(), 9).unwrap();
        let c = Model::<f32>::new(tiny_cfg(), 10).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn variant_parameter_counts() {
        let count = |v| {
            Model::<f32>::new(ModelConfig::variant(v, 16384).unwrap(), 0)
                .unwrap()
                .param_count()
        };
        let (b, m, l) = (count(Variant::B), count(Variant::M), count(Variant::L));
        assert!((1_100_000..=3_300_000).contains(&b), "{b}");
        assert!(l > m && m > b, "{b} {m} {l}");
    }

    /// Redraws attention projections with std 0.5 so attention logits are
    /// not vanishingly small.
    pub(crate) fn spread_weights(store: &mut ParamStore<f64>, seed: u64) {
        let mut r = rng::seeded(seed);
        for id in store.ids().collect::<Vec<_>>() {
            let name = &store.entry(id).name;
            if name.contains(".att.w") {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::randn(&shape, 0.5, &mut r);
            }
        }
    }

    #[test]
    fn end_to_end_gradients() {
        let mut model = Model::<f64>::new(tiny_cfg(), 6).unwrap();
        spread_weights(&mut model.params, 7);
        let seqs = [seq(8, 8, 6, 3), seq(8, 5, 6, 4)];
        let refs: Vec<_> = seqs.iter().collect();
        let rep = gradcheck::check_params(&model.params, |s| {
            let mut t = Tape::new(Mode::Train, 1);
            let f = model.forward_with(s, &mut t, &refs)?;
            let lc = crate::training::cross_entropy_logits(&mut t, f.logits, &[1, 0])?;
            let loss = crate::training::total_loss(&mut t, lc, f.mvae.image.total, f.mvae.text.total, [1.0, 0.3, 0.4])?;
            Ok((t, loss))
        })
        .unwrap();
        assert!(rep.worst() <= 1e-3, "{:?}: {}", rep.worst_name(), rep.worst());
    }
}
