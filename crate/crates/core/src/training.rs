//! Classification head, losses, the training loop, and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blocks::Model;
use crate::data::{Label, StandardSequence};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;

/// `8D → 4D → dropout → 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub l1: Linear,
    pub l2: Linear,
    pub dropout: f64,
}

impl Head {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, dropout: f64, rng: &mut Rng) -> Self {
        Head {
            l1: Linear::new(store, &format!("{name}.l1"), width, width / 2, rng),
            l2: Linear::new(store, &format!("{name}.l2"), width / 2, 2, rng),
            dropout,
        }
    }

    /// Pre-softmax scores, `N×2`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, cls: Var) -> Result<Var> {
        if tape.value(cls).cols() != self.l1.fan_in {
            return Err(Error::shape("classify", tape.shape(cls), &[self.l1.fan_in]));
        }
        let h = self.l1.forward(tape, store, cls)?;
        let h = tape.dropout(h, self.dropout)?;
        self.l2.forward(tape, store, h)
    }
}

/// Class probabilities for each CLS row.
pub fn classify<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, head: &Head, cls: Var) -> Result<Var> {
    let logits = head.forward(tape, store, cls)?;
    tape.softmax_rows(logits, None)
}

/// `−(1/N) Σ log max(p[label], 1e-12)` over plain probabilities.
pub fn cross_entropy(probs: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = probs.len() as f64;
    -probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| p[y].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / n
}

/// Differentiable cross-entropy of `softmax(logits)` against `labels`.
pub fn cross_entropy_logits<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let p = tape.softmax_rows(logits, None)?;
    let p = tape.clamp(p, T::lit(PROB_FLOOR), T::one());
    let lp = tape.ln(p);
    let picked = tape.gather(lp, labels)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -T::one()))
}

/// `ψ₁·L_cls + ψ₂·L_image + ψ₃·L_text`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, cls: Var, image: Var, text: Var, psi: [f64; 3]) -> Result<Var> {
    if psi.iter().any(|&p| p < 0.0) {
        return Err(Error::invalid(format!(
            "loss weights must be non-negative, got {psi:?}"
        )));
    }
    let a = tape.scale(cls, T::lit(psi[0]));
    let b = tape.scale(image, T::lit(psi[1]));
    let c = tape.scale(text, T::lit(psi[2]));
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without a new best validation accuracy before stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Minibatches whose gradients are averaged into one optimizer step.
    pub accumulate: usize,
    pub psi: [f64; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            max_epochs: 60,
            patience: 5,
            batch_size: 4,
            accumulate: 1,
            psi: [1.0, 0.3, 0.4],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub l_cls: f64,
    pub l_text: f64,
    pub l_image: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,l_cls,l_text,l_image,train_acc,val_acc\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.l_cls, e.l_text, e.l_image, e.train_acc, e.val_acc
            ));
        }
        s
    }
}

fn argmax2(row: &[f64]) -> usize {
    usize::from(row[1] > row[0])
}

/// Eval-mode class predictions, `batch` sequences per forward pass.
pub fn predict<T: Scalar>(model: &Model<T>, seqs: &[StandardSequence<T>], batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch.max(1)) {
        let mut tape = Tape::new(Mode::Eval, 0);
        let refs: Vec<_> = chunk.iter().collect();
        let f = model.forward(&mut tape, &refs)?;
        let logits = tape.value(f.logits).cast::<f64>();
        out.extend(logits.data().chunks_exact(2).map(argmax2));
    }
    Ok(out)
}

fn accuracy(pred: &[usize], seqs: &[impl std::borrow::Borrow<Label>]) -> f64 {
    let hits = pred.iter().zip(seqs).filter(|(p, l)| **p == l.borrow().index()).count();
    hits as f64 / pred.len().max(1) as f64
}

/// Minibatch Adam on the composite loss with early stopping on validation
/// accuracy. The best-validation weights are restored before returning.
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    train: &[StandardSequence<T>],
    val: &[StandardSequence<T>],
    cfg: &TrainConfig,
) -> Result<History> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    if cfg.batch_size == 0 || cfg.accumulate == 0 {
        return Err(Error::invalid("batch size and accumulation count must be positive"));
    }
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut order_rng = rng::derive(cfg.seed, 2);
    let val_labels: Vec<Label> = val.iter().map(|s| s.label).collect();
    let mut history = History {
        best_val_acc: f64::NEG_INFINITY,
        ..History::default()
    };
    let mut best = model.params.clone();
    let mut stale = 0;
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut sums = [0.0f64; 4];
        let mut hits = 0usize;
        let batches = order.len().div_ceil(cfg.batch_size);
        let mut pending: Option<Vec<Tensor<T>>> = None;
        let mut pending_count = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let mut tape = Tape::with_rng(Mode::Train, rng::derive(cfg.seed, 1000 + step));
            let refs: Vec<_> = idx.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|s| s.label.index()).collect();
            let f = model.forward(&mut tape, &refs)?;
            let lc = cross_entropy_logits(&mut tape, f.logits, &labels)?;
            let loss = total_loss(&mut tape, lc, f.mvae.image.total, f.mvae.text.total, cfg.psi)?;
            tape.backward(loss)?;
            let grads = tape.param_grads(&model.params);
            pending = Some(match pending.take() {
                None => grads,
                Some(mut acc) => {
                    acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g));
                    acc
                }
            });
            pending_count += 1;
            if pending_count == cfg.accumulate || bi + 1 == batches {
                let mut grads = pending.take().unwrap_or_default();
                if pending_count > 1 {
                    let inv = T::one() / T::from_usize(pending_count).unwrap();
                    grads.iter_mut().for_each(|g| *g = g.map(|v| v * inv));
                }
                adam.step(&mut model.params, &grads)?;
                pending_count = 0;
            }
            let stats = tape.take_stat_updates();
            model.params.apply_stat_updates(stats);

            let item = |v: Var| tape.value(v).item().to_f64_lossy();
            for (s, v) in sums.iter_mut().zip([loss, lc, f.mvae.text.total, f.mvae.image.total]) {
                *s += item(v);
            }
            let logits = tape.value(f.logits).cast::<f64>();
            hits += logits
                .data()
                .chunks_exact(2)
                .zip(&labels)
                .filter(|(r, &y)| argmax2(r) == y)
                .count();
        }
        let val_acc = accuracy(&predict(model, val, 16)?, &val_labels);
        let b = batches as f64;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: sums[0] / b,
            l_cls: sums[1] / b,
            l_text: sums[2] / b,
            l_image: sums[3] / b,
            train_acc: hits as f64 / train.len() as f64,
            val_acc,
        });
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.3} val acc {:.3}",
            sums[0] / b,
            hits as f64 / train.len() as f64,
            val_acc
        );
        if val_acc > history.best_val_acc {
            history.best_val_acc = val_acc;
            history.best_epoch = epoch;
            best = model.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.params = best;
    Ok(history)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// Spammer predicted as spammer.
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(pred: &[usize], labels: &[Label]) -> Self {
        let mut c = Confusion::default();
        for (&p, l) in pred.iter().zip(labels) {
            match (l, p) {
                (Label::Spammer, 1) => c.tp += 1,
                (Label::Spammer, _) => c.fn_ += 1,
                (Label::Normal, 1) => c.fp += 1,
                (Label::Normal, _) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassMetrics {
    fn new(tp: usize, fp: usize, fn_: usize, degenerate: &mut bool) -> Self {
        let precision = ratio(tp, tp + fp, degenerate);
        let recall = ratio(tp, tp + fn_, degenerate);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassMetrics { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub normal: ClassMetrics,
    pub spammer: ClassMetrics,
    pub confusion: Confusion,
    /// Some precision or recall had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub const HEADLINE: [&str; 7] = [
    "accuracy",
    "normal_precision",
    "normal_recall",
    "normal_f1",
    "spammer_precision",
    "spammer_recall",
    "spammer_f1",
];

impl MetricsReport {
    pub fn from_confusion(c: Confusion) -> Self {
        let mut degenerate = false;
        let spammer = ClassMetrics::new(c.tp, c.fp, c.fn_, &mut degenerate);
        let normal = ClassMetrics::new(c.tn, c.fn_, c.fp, &mut degenerate);
        MetricsReport {
            accuracy: (c.tp + c.tn) as f64 / c.total().max(1) as f64,
            normal,
            spammer,
            confusion: c,
            degenerate,
        }
    }

    pub fn headline(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.normal.precision,
            self.normal.recall,
            self.normal.f1,
            self.spammer.precision,
            self.spammer.recall,
            self.spammer.f1,
        ]
    }

    /// Table layout: one row per class plus overall accuracy.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10}{:>10}{:>10}{:>10}\n", "class", "precision", "recall", "f1");
        for (name, m) in [("normal", self.normal), ("spammer", self.spammer)] {
            s.push_str(&format!(
                "{name:<10}{:>10.4}{:>10.4}{:>10.4}\n",
                m.precision, m.recall, m.f1
            ));
        }
        s.push_str(&format!("accuracy  {:>10.4}\n", self.accuracy));
        if self.degenerate {
            s.push_str("note: undefined precision/recall reported as 0\n");
        }
        s
    }
}

pub fn evaluate<T: Scalar>(model: &Model<T>, seqs: &[StandardSequence<T>]) -> Result<MetricsReport> {
    if seqs.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let pred = predict(model, seqs, 16)?;
    let labels: Vec<Label> = seqs.iter().map(|s| s.label).collect();
    Ok(MetricsReport::from_confusion(Confusion::from_predictions(
        &pred, &labels,
    )))
}

/// Mean and sample standard deviation of the headline metrics over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: Vec<MetricsReport>,
    pub mean: [f64; 7],
    pub std: [f64; 7],
}

impl SeedSummary {
    pub fn new(runs: Vec<MetricsReport>) -> Self {
        let n = runs.len() as f64;
        let mut mean = [0.0; 7];
        let mut std = [0.0; 7];
        for r in &runs {
            for (m, v) in mean.iter_mut().zip(r.headline()) {
                *m += v / n;
            }
        }
        if runs.len() > 1 {
            for r in &runs {
                for ((s, v), m) in std.iter_mut().zip(r.headline()).zip(mean) {
                    *s += (v - m).powi(2) / (n - 1.0);
                }
            }
            std.iter_mut().for_each(|s| *s = s.sqrt());
        }
        SeedSummary { runs, mean, std }
    }

    pub fn table(&self) -> String {
        HEADLINE
            .iter()
            .enumerate()
            .map(|(i, name)| format!("{name:<18}{:.4} ± {:.4}\n", self.mean[i], self.std[i]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuReport {
    pub seconds_per_user: f64,
    pub users: usize,
    pub param_count: usize,
    /// Attention scores materialized for one user's forward pass.
    pub scores_per_user: u64,
    /// Largest single attention call among them.
    pub peak_scores: u64,
}

/// Eval-mode seconds per user, median over `repeats`. Each repeat cycles
/// through `seqs` until at least 50 users were processed.
pub fn measure_spu<T: Scalar>(model: &Model<T>, seqs: &[StandardSequence<T>], repeats: usize) -> Result<SpuReport> {
    if seqs.is_empty() || repeats == 0 {
        return Err(Error::invalid("SPU needs users and at least one repeat"));
    }
    let users = seqs.len().max(50);
    let mut times = Vec::with_capacity(repeats);
    let mut ledger = None;
    for _ in 0..repeats {
        let start = Instant::now();
        for i in 0..users {
            let mut tape = Tape::new(Mode::Eval, 0);
            model.forward(&mut tape, &[&seqs[i % seqs.len()]])?;
            if ledger.is_none() {
                ledger = Some(tape.scores().clone());
            }
        }
        times.push(start.elapsed().as_secs_f64() / users as f64);
    }
    times.sort_by(f64::total_cmp);
    let ledger = ledger.unwrap_or_default();
    Ok(SpuReport {
        seconds_per_user: times[times.len() / 2],
        users,
        param_count: model.param_count(),
        scores_per_user: ledger.total(),
        peak_scores: ledger.peak(),
    })
}

/// Convenience for tests and tools: loss gradient of each trainable tensor.
pub fn loss_gradients<T: Scalar>(
    model: &Model<T>,
    store: &ParamStore<T>,
    seqs: &[&StandardSequence<T>],
    psi: [f64; 3],
    seed: u64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new(Mode::Train, seed);
    let labels: Vec<usize> = seqs.iter().map(|s| s.label.index()).collect();
    let f = model.forward_with(store, &mut tape, seqs)?;
    let lc = cross_entropy_logits(&mut tape, f.logits, &labels)?;
    let loss = total_loss(&mut tape, lc, f.mvae.image.total, f.mvae.text.total, psi)?;
    tape.backward(loss)?;
    Ok((tape.value(loss).item().to_f64_lossy(), tape.param_grads(store)))
}
